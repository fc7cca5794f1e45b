"""Coarse-to-fine feature warping registration network.

A shared-weight pyramid encoder produces per-level features for both
images; a per-level estimator then refines the displacement field from
the bottom (coarsest) level up to full resolution. Each level predicts a
residual on top of the upsampled coarser field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .regops import correlation, upsample_field, warp
from .tensor import Tensor, concat_channels, conv3d, leaky_relu

ABLATIONS = ("full", "baseline1", "baseline2")


@dataclass
class NetworkConfig:
    """Architectural hyperparameters; defaults are desk-scale."""

    levels: int = 3
    encoder_channels: tuple[int, ...] = (8, 16, 32)
    search_range: int = 1
    estimator_widths: tuple[int, ...] = (32, 32, 16)
    ablation: str = "full"
    leaky_slope: float = 0.1

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.estimator_widths = tuple(int(c) for c in self.estimator_widths)
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.encoder_channels) != self.levels:
            raise ConfigError(
                f"encoder_channels has {len(self.encoder_channels)} entries for {self.levels} levels"
            )
        if self.search_range < 0:
            raise ConfigError(f"search_range must be >= 0, got {self.search_range}")
        if self.leaky_slope < 0:
            raise ConfigError(f"leaky_slope must be >= 0, got {self.leaky_slope}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    @property
    def cost_channels(self):
        return (2 * self.search_range + 1) ** 3

    def estimator_in_channels(self, level):
        """Channel count entering the level's estimator after concatenation."""
        feat = self.encoder_channels[level - 1]
        base = 2 * feat + 3
        if self.ablation == "full":
            return base + self.cost_channels
        return base

    def to_dict(self):
        return {
            "levels": self.levels,
            "encoder_channels": list(self.encoder_channels),
            "search_range": self.search_range,
            "estimator_widths": list(self.estimator_widths),
            "ablation": self.ablation,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            levels=int(d["levels"]),
            encoder_channels=tuple(d["encoder_channels"]),
            search_range=int(d["search_range"]),
            estimator_widths=tuple(d["estimator_widths"]),
            ablation=str(d["ablation"]),
            leaky_slope=float(d["leaky_slope"]),
        )


def _init_conv(rng, c_out, c_in, zero=False, dtype=np.float32, slope=0.1):
    if zero:
        w = np.zeros((c_out, c_in, 3, 3, 3), dtype=dtype)
    else:
        # He-style uniform with the leaky-relu gain so activation variance
        # is preserved through the stack (plain 1/fan_in shrinks features
        # several orders of magnitude by the coarsest level).
        gain = np.sqrt(2.0 / (1.0 + slope * slope))
        limit = gain * np.sqrt(3.0 / (c_in * 27))
        w = rng.uniform(-limit, limit, size=(c_out, c_in, 3, 3, 3)).astype(dtype)
    b = np.zeros(c_out, dtype=dtype)
    return Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)


class CascadeNetwork:
    """Parameter container plus forward pass for the full cascade."""

    def __init__(self, config: NetworkConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        chans = config.encoder_channels
        prev = 1
        for lvl in range(1, config.levels + 1):
            c = chans[lvl - 1]
            w, b = _init_conv(rng, c, prev, slope=config.leaky_slope)
            self.params[f"encoder.l{lvl}.conv1.weight"] = w
            self.params[f"encoder.l{lvl}.conv1.bias"] = b
            w, b = _init_conv(rng, c, c, slope=config.leaky_slope)
            self.params[f"encoder.l{lvl}.conv2.weight"] = w
            self.params[f"encoder.l{lvl}.conv2.bias"] = b
            prev = c
        for lvl in range(1, config.levels + 1):
            c_in = config.estimator_in_channels(lvl)
            for j, width in enumerate(config.estimator_widths):
                w, b = _init_conv(rng, width, c_in, slope=config.leaky_slope)
                self.params[f"fwr.l{lvl}.conv{j}.weight"] = w
                self.params[f"fwr.l{lvl}.conv{j}.bias"] = b
                c_in = width
            # zero init: the untrained cascade is the identity transform
            w, b = _init_conv(rng, 3, c_in, zero=True)
            self.params[f"fwr.l{lvl}.out.weight"] = w
            self.params[f"fwr.l{lvl}.out.bias"] = b

    def parameters(self):
        return self.params

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ConfigError(
                f"checkpoint/config mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ConfigError(
                    f"checkpoint/config mismatch: '{k}' has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.copy()
            p.grad = None

    def _validate_dims(self, shape):
        divisor = 2 ** (self.config.levels - 1)
        if any(s % divisor for s in shape):
            raise ShapeMismatchError(
                f"input dims {shape} must be divisible by {divisor} for {self.config.levels} levels"
            )

    def encode(self, image):
        """Feature pyramid F^1..F^N for one [1, D, H, W] image."""
        if image.data.ndim != 4 or image.data.shape[0] != 1:
            raise ShapeMismatchError(f"encode: image must be [1,D,H,W], got {image.data.shape}")
        self._validate_dims(image.data.shape[1:])
        slope = self.config.leaky_slope
        feats = []
        x = image
        for lvl in range(1, self.config.levels + 1):
            stride = 1 if lvl == 1 else 2
            x = leaky_relu(
                conv3d(
                    x,
                    self.params[f"encoder.l{lvl}.conv1.weight"],
                    self.params[f"encoder.l{lvl}.conv1.bias"],
                    stride=stride,
                ),
                slope,
            )
            x = leaky_relu(
                conv3d(
                    x,
                    self.params[f"encoder.l{lvl}.conv2.weight"],
                    self.params[f"encoder.l{lvl}.conv2.bias"],
                    stride=1,
                ),
                slope,
            )
            feats.append(x)
        return feats

    def fwr_step(self, level, f_m, f_f, prev_field):
        """One feature-warping refinement; returns the level's field."""
        if f_m.data.shape != f_f.data.shape:
            raise ShapeMismatchError(
                f"fwr_step: feature shapes {f_m.data.shape} and {f_f.data.shape} differ"
            )
        cfg = self.config
        if prev_field is None:
            up = Tensor(np.zeros((3,) + f_m.data.shape[1:], dtype=f_m.data.dtype))
        else:
            up = upsample_field(prev_field)
            if up.data.shape[1:] != f_m.data.shape[1:]:
                raise ShapeMismatchError(
                    f"fwr_step: upsampled field dims {up.data.shape[1:]} != feature dims {f_m.data.shape[1:]}"
                )
        if cfg.ablation == "baseline1":
            f_w = f_m
        else:
            f_w = warp(f_m, up)
        parts = []
        if cfg.ablation == "full":
            parts.append(correlation(f_f, f_w, cfg.search_range))
        parts.extend([f_f, f_w, up])
        x = concat_channels(parts)
        for j in range(len(cfg.estimator_widths)):
            x = leaky_relu(
                conv3d(
                    x,
                    self.params[f"fwr.l{level}.conv{j}.weight"],
                    self.params[f"fwr.l{level}.conv{j}.bias"],
                ),
                cfg.leaky_slope,
            )
        residual = conv3d(
            x, self.params[f"fwr.l{level}.out.weight"], self.params[f"fwr.l{level}.out.bias"]
        )
        return residual + up

    def forward(self, moving, fixed):
        """Multi-scale fields [phi^1 .. phi^N], finest first."""
        if moving.data.shape != fixed.data.shape:
            raise ShapeMismatchError(
                f"forward: image shapes {moving.data.shape} and {fixed.data.shape} differ"
            )
        fm = self.encode(moving)
        ff = self.encode(fixed)
        fields = [None] * self.config.levels
        prev = None
        for lvl in range(self.config.levels, 0, -1):
            prev = self.fwr_step(lvl, fm[lvl - 1], ff[lvl - 1], prev)
            fields[lvl - 1] = prev
        return fields
