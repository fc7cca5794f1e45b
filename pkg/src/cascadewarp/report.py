"""Delimited reports, matplotlib figures, and PGM slice dumps."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def write_eval_report(path, rows, aggregate):
    """Tab-separated per-pair rows plus an aggregate footer."""
    all_labels = sorted({lbl for r in rows for lbl in r["per_label"]})
    with open(path, "w") as fh:
        header = ["pair", "identity_dice", "model_dice"] + [f"label_{lbl}" for lbl in all_labels]
        fh.write("\t".join(header) + "\n")
        for r in rows:
            cells = [str(r["pair"]), f"{r['identity_dice']:.6f}", f"{r['model_dice']:.6f}"]
            cells += [f"{r['per_label'].get(lbl, float('nan')):.6f}" for lbl in all_labels]
            fh.write("\t".join(cells) + "\n")
        fh.write(
            "# aggregate\tpairs={pairs}\tidentity_mean={identity_mean:.6f}\t"
            "identity_std={identity_std:.6f}\tmodel_mean={model_mean:.6f}\t"
            "model_std={model_std:.6f}\n".format(**aggregate)
        )


def render_eval_figure(path, rows, aggregate):
    """Per-pair identity vs model Dice bar chart next to the report."""
    idx = np.arange(len(rows))
    identity = [r["identity_dice"] for r in rows]
    model = [r["model_dice"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(rows)), 4))
    width = 0.4
    ax.bar(idx - width / 2, identity, width, label="identity", color="tab:gray")
    ax.bar(idx + width / 2, model, width, label="model", color="tab:blue")
    ax.axhline(aggregate["model_mean"], color="tab:blue", ls="--", lw=1)
    ax.axhline(aggregate["identity_mean"], color="tab:gray", ls="--", lw=1)
    ax.set_xlabel("pair")
    ax.set_ylabel("mean Dice")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_figure(path, records):
    """Total loss and per-level similarity terms over training steps."""
    steps = [r.step for r in records]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, [r.total for r in records], label="total", color="black")
    n_levels = len(records[0].sims) if records else 0
    for i in range(n_levels):
        ax.plot(steps, [r.sims[i] for r in records], label=f"sim level {i + 1}", alpha=0.7)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_pgm(path, image):
    """8-bit binary PGM of a 2-D array, min-max scaled."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo < 1e-12:
        scaled = np.zeros_like(img, dtype=np.uint8)
    else:
        scaled = np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(scaled.tobytes())


def dump_slices(out_dir, warped_per_level, fields_per_level):
    """Mid-axial slices of warped images and field channels, one PGM each."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for i, (warped, field) in enumerate(zip(warped_per_level, fields_per_level), start=1):
        mid = warped.shape[1] // 2
        p = os.path.join(out_dir, f"level{i}_warped.pgm")
        write_pgm(p, warped[0, mid])
        written.append(p)
        for k, name in enumerate("zyx"):
            p = os.path.join(out_dir, f"level{i}_field_{name}.pgm")
            write_pgm(p, field[k, field.shape[1] // 2])
            written.append(p)
    return written
