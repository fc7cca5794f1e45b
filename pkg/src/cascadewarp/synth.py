"""Synthetic labeled phantoms with known smooth deformations, plus Dice.

Stands in for real MRI at desk scale: ellipsoidal blob regions with
distinct intensities, deformed by a smooth control-point field whose
ground truth is kept for end-to-end validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeMismatchError
from .regops import warp, warp_labels
from .tensor import Tensor


@dataclass
class LabeledVolume:
    intensity: np.ndarray  # [1, D, H, W] float32 in [0, 1]
    labels: np.ndarray  # [D, H, W] int32, 0 = background

    @property
    def dims(self):
        return self.labels.shape


@dataclass
class SynthDeformSpec:
    spacing: int = 8  # control-point grid spacing, voxels
    max_disp: float = 2.0  # max control displacement, voxels
    smooth: float = 0.0  # extra gaussian smoothing of the dense field
    seed: int = 0

    def __post_init__(self):
        if self.max_disp >= self.spacing / 2:
            raise ConfigError(
                f"max_disp {self.max_disp} must be < spacing/2 = {self.spacing / 2}"
            )
        if self.spacing < 2:
            raise ConfigError(f"spacing must be >= 2, got {self.spacing}")


def make_phantom(dims, num_labels, seed):
    """Random ellipsoid-blob phantom with num_labels foreground regions."""
    d, h, w = dims
    if num_labels < 2:
        raise ConfigError(f"num_labels must be >= 2, got {num_labels}")
    if min(dims) < 4 * num_labels // 2 or min(dims) < 8:
        raise ConfigError(f"dims {dims} too small to host {num_labels} regions")
    rng = np.random.default_rng(seed)
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    score = np.full(dims, -np.inf)
    labels = np.zeros(dims, dtype=np.int32)
    for lbl in range(1, num_labels + 1):
        center = rng.uniform(0.25, 0.75, size=3) * np.array(dims)
        radii = rng.uniform(0.14, 0.30, size=3) * np.array(dims)
        q = (
            ((zz - center[0]) / radii[0]) ** 2
            + ((yy - center[1]) / radii[1]) ** 2
            + ((xx - center[2]) / radii[2]) ** 2
        )
        inside = q < 1.0
        s = 1.0 - q
        take = inside & (s > score)
        labels[take] = lbl
        score[take] = s[take]
    base_levels = np.linspace(0.25, 0.9, num_labels)
    rng.shuffle(base_levels)
    intensity = np.full(dims, 0.05, dtype=np.float64)
    for lbl in range(1, num_labels + 1):
        intensity[labels == lbl] = base_levels[lbl - 1]
    texture = ndimage.gaussian_filter(rng.standard_normal(dims), 1.5)
    texture /= max(np.abs(texture).max(), 1e-9)
    intensity = np.clip(intensity + 0.05 * texture, 0.0, 1.0)
    return LabeledVolume(
        intensity=intensity.astype(np.float32)[None], labels=labels
    )


def make_truth_field(dims, spec: SynthDeformSpec):
    """Dense smooth displacement field from seeded control-point offsets."""
    rng = np.random.default_rng(spec.seed)
    ctrl_dims = [max(2, s // spec.spacing + 1) for s in dims]
    ctrl = rng.uniform(-spec.max_disp, spec.max_disp, size=(3, *ctrl_dims))
    dense = np.empty((3, *dims), dtype=np.float64)
    coords = np.meshgrid(
        *[np.linspace(0, c - 1, s) for c, s in zip(ctrl_dims, dims)], indexing="ij"
    )
    for k in range(3):
        dense[k] = ndimage.map_coordinates(ctrl[k], coords, order=3, mode="nearest")
        if spec.smooth > 0:
            dense[k] = ndimage.gaussian_filter(dense[k], spec.smooth)
    return dense.astype(np.float32)


def make_pair(base: LabeledVolume, spec: SynthDeformSpec):
    """(moving, fixed, truth): fixed is the base resampled through truth.

    fixed(x) = moving(x + truth(x)), so truth is exactly the field a
    registration network should predict for this pair.
    """
    truth = make_truth_field(base.dims, spec)
    field_t = Tensor(truth)
    fixed_int = warp(Tensor(base.intensity), field_t).data
    fixed_lab = warp_labels(base.labels, field_t)
    moving = LabeledVolume(intensity=base.intensity.copy(), labels=base.labels.copy())
    fixed = LabeledVolume(intensity=fixed_int.astype(np.float32), labels=fixed_lab)
    return moving, fixed, truth


def dice(labels_a, labels_b, label_set=None):
    """Per-label and mean Dice overlap; background 0 is excluded."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"dice: shapes {a.shape} and {b.shape} differ")
    if label_set is None:
        label_set = sorted(set(np.unique(a)) | set(np.unique(b)))
    scores = {}
    for lbl in label_set:
        if lbl == 0:
            continue
        ma = a == lbl
        mb = b == lbl
        na, nb = int(ma.sum()), int(mb.sum())
        if na == 0 and nb == 0:
            continue
        scores[int(lbl)] = 2.0 * int((ma & mb).sum()) / (na + nb)
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


def evaluate(model, pairs):
    """Registration quality over (moving, fixed) LabeledVolume pairs.

    Per pair: run the cascade, warp the moving labels with the finest
    field, and score against the fixed labels; the identity (no-warp)
    Dice is reported as the baseline.
    """
    rows = []
    for idx, (moving, fixed) in enumerate(pairs):
        fields = model.forward(
            Tensor(moving.intensity.astype(np.float32)),
            Tensor(fixed.intensity.astype(np.float32)),
        )
        warped_lab = warp_labels(moving.labels, fields[0])
        _, identity_mean = dice(moving.labels, fixed.labels)
        per_label, model_mean = dice(warped_lab, fixed.labels)
        rows.append(
            {
                "pair": idx,
                "identity_dice": identity_mean,
                "model_dice": model_mean,
                "per_label": per_label,
            }
        )
    model_means = [r["model_dice"] for r in rows]
    identity_means = [r["identity_dice"] for r in rows]
    aggregate = {
        "pairs": len(rows),
        "identity_mean": float(np.mean(identity_means)) if rows else float("nan"),
        "identity_std": float(np.std(identity_means)) if rows else float("nan"),
        "model_mean": float(np.mean(model_means)) if rows else float("nan"),
        "model_std": float(np.std(model_means)) if rows else float("nan"),
    }
    return rows, aggregate
