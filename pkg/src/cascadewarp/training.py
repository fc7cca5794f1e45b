"""Multi-scale loss assembly and the training loop."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NonFiniteLossError, ShapeMismatchError
from .optim import Adam
from .regops import diffusion_reg, nlcc, warp
from .tensor import Tensor, avg_downsample2


@dataclass
class LossConfig:
    """Per-level similarity/regularizer weighting.

    Level i (1 = finest) is weighted 1/2^(i-1); nlcc_windows[i-1] is the
    local window at that level (largest at the finest level by default).
    """

    lam: float = 1.0
    nlcc_windows: tuple[int, ...] = (9, 5, 3)

    def __post_init__(self):
        self.nlcc_windows = tuple(int(w) for w in self.nlcc_windows)
        for w in self.nlcc_windows:
            if w % 2 == 0 or w < 3:
                raise ConfigError(f"nlcc window must be odd and >= 3, got {w}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")

    def level_weight(self, level):
        return 0.5 ** (level - 1)

    def to_dict(self):
        return {"lam": self.lam, "nlcc_windows": list(self.nlcc_windows)}

    @classmethod
    def from_dict(cls, d):
        return cls(lam=float(d["lam"]), nlcc_windows=tuple(d["nlcc_windows"]))


@dataclass
class TrainRecord:
    step: int
    total: float
    sims: list[float]
    regs: list[float]
    millis: float

    def weighted_total(self, cfg: LossConfig):
        return sum(
            cfg.level_weight(i + 1) * (s + cfg.lam * r)
            for i, (s, r) in enumerate(zip(self.sims, self.regs))
        )

    def to_json(self):
        return json.dumps(
            {
                "step": self.step,
                "total": self.total,
                "sims": self.sims,
                "regs": self.regs,
                "millis": self.millis,
            }
        )


def multi_scale_loss(moving, fixed, fields, cfg: LossConfig):
    """Weighted sum over levels of NLCC(warped, fixed) + lam * smoothness.

    Images at level i are built by i-1 rounds of 2x average pooling.
    Returns (scalar loss Tensor, per-level sims, per-level regs).
    """
    n_levels = len(fields)
    if len(cfg.nlcc_windows) != n_levels:
        raise ConfigError(
            f"{len(cfg.nlcc_windows)} nlcc windows configured for {n_levels} levels"
        )
    total = None
    sims = []
    regs = []
    im, if_ = moving, fixed
    for i in range(1, n_levels + 1):
        phi = fields[i - 1]
        if phi.data.shape[1:] != im.data.shape[1:]:
            raise ShapeMismatchError(
                f"level {i}: field dims {phi.data.shape[1:]} != image dims {im.data.shape[1:]}"
            )
        warped = warp(im, phi)
        sim = nlcc(warped, if_, cfg.nlcc_windows[i - 1])
        reg = diffusion_reg(phi)
        sims.append(float(sim.data))
        regs.append(float(reg.data))
        term = (sim + cfg.lam * reg) * cfg.level_weight(i)
        total = term if total is None else total + term
        if i < n_levels:
            im = avg_downsample2(im)
            if_ = avg_downsample2(if_)
    return total, sims, regs


def train(
    model,
    pairs,
    loss_cfg: LossConfig,
    steps,
    lr=1e-4,
    seed=0,
    checkpoint_every=100,
    checkpoint_fn=None,
    log_fn=None,
):
    """Batch-size-1 Adam training over a pool of (moving, fixed) arrays.

    Pairs are drawn by a seeded RNG, one per step. Returns the list of
    TrainRecords; the model is updated in place. Raises NonFiniteLossError
    if the loss leaves the finite range.
    """
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    records: list[TrainRecord] = []
    if steps == 0:
        return records
    rng = np.random.default_rng(seed)
    opt = Adam(model.parameters(), lr=lr)
    for step in range(1, steps + 1):
        idx = int(rng.integers(len(pairs)))
        mov, fix = pairs[idx]
        t0 = time.perf_counter()
        moving = Tensor(np.asarray(mov, dtype=np.float32))
        fixed = Tensor(np.asarray(fix, dtype=np.float32))
        fields = model.forward(moving, fixed)
        loss, sims, regs = multi_scale_loss(moving, fixed, fields, loss_cfg)
        total = float(loss.data)
        if not np.isfinite(total):
            last = records[-1] if records else None
            raise NonFiniteLossError(f"non-finite loss at step {step}", step, last)
        loss.backward()
        opt.step()
        millis = (time.perf_counter() - t0) * 1000.0
        rec = TrainRecord(step=step, total=total, sims=sims, regs=regs, millis=millis)
        records.append(rec)
        if log_fn is not None:
            log_fn(rec)
        if checkpoint_fn is not None and (step % checkpoint_every == 0 or step == steps):
            checkpoint_fn(step, model)
    return records
