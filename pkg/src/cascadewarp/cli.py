"""Command-line entry point: synth / train / register / eval / gradcheck.

All randomness flows from --seed; --threads 1 pins the numeric backends
to a single thread for bit-reproducible runs (set before numpy loads).
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _build_parser():
    p = argparse.ArgumentParser(
        prog="cascadewarp",
        description="Coarse-to-fine feature-warping deformable 3D registration (CPU).",
    )
    p.add_argument("--threads", type=int, default=None, help="thread cap; 1 = deterministic mode")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic labeled pairs with ground-truth fields")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int, default=5)
    s.add_argument("--dims", default="24,24,24")
    s.add_argument("--labels", type=int, default=4)
    s.add_argument("--max-disp", type=float, default=2.0)
    s.add_argument("--spacing", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train on a synthesized pair directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None, help="step log path (default: <out>.log)")

    r = sub.add_parser("register", help="register one moving volume to a fixed volume")
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out-field", required=True)
    r.add_argument("--out-warped", required=True)
    r.add_argument("--dump-slices", default=None)

    e = sub.add_parser("eval", help="Dice evaluation of a checkpoint on a pair directory")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference verification of all operations")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--op", default=None)
    return p


def _parse_dims(text):
    parts = [int(x) for x in text.replace(",", " ").split()]
    if len(parts) != 3 or any(x < 4 for x in parts):
        raise ValueError(f"--dims must be three integers >= 4, got {text!r}")
    return tuple(parts)


def cmd_synth(args):
    import numpy as np

    from .errors import ShapeMismatchError
    from .synth import SynthDeformSpec, make_pair, make_phantom
    from .volio import write_volume

    dims = _parse_dims(args.dims)
    if any(d % 4 for d in dims):
        raise ShapeMismatchError(f"dims {dims} must be divisible by 4 (3-level pyramid)")
    if args.max_disp > 0 and args.max_disp >= args.spacing / 2:
        raise ShapeMismatchError(
            f"--max-disp {args.max_disp} must be < spacing/2 = {args.spacing / 2}"
        )
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for k in range(args.pairs):
        base = make_phantom(dims, args.labels, seed=args.seed * 10_000 + k)
        if args.max_disp > 0:
            spec = SynthDeformSpec(
                spacing=args.spacing, max_disp=args.max_disp, seed=args.seed * 10_000 + k + 1
            )
            moving, fixed, truth = make_pair(base, spec)
        else:
            moving = base
            fixed = base
            truth = np.zeros((3, *dims), dtype=np.float32)
        names = {
            "moving": f"pair{k:03d}_moving.cwv",
            "fixed": f"pair{k:03d}_fixed.cwv",
            "moving_labels": f"pair{k:03d}_moving_labels.cwv",
            "fixed_labels": f"pair{k:03d}_fixed_labels.cwv",
            "truth": f"pair{k:03d}_truth.cwv",
        }
        write_volume(os.path.join(args.out, names["moving"]), moving.intensity)
        write_volume(os.path.join(args.out, names["fixed"]), fixed.intensity)
        write_volume(os.path.join(args.out, names["moving_labels"]), moving.labels)
        write_volume(os.path.join(args.out, names["fixed_labels"]), fixed.labels)
        write_volume(os.path.join(args.out, names["truth"]), truth)
        entries.append({"id": k, **names})
    manifest = {
        "dims": list(dims),
        "labels": args.labels,
        "max_disp": args.max_disp,
        "spacing": args.spacing,
        "seed": args.seed,
        "pairs": entries,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {len(entries)} pairs to {args.out}")
    return 0


def _load_manifest(data_dir):
    from .errors import DataFormatError

    path = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(path):
        raise DataFormatError(f"missing manifest: {path}")
    with open(path) as fh:
        return json.load(fh)


def _load_pairs(data_dir, manifest, with_labels=False):
    from .synth import LabeledVolume
    from .volio import read_volume

    pairs = []
    for entry in manifest["pairs"]:
        mov, _ = read_volume(os.path.join(data_dir, entry["moving"]))
        fix, _ = read_volume(os.path.join(data_dir, entry["fixed"]))
        if with_labels:
            mlab, _ = read_volume(os.path.join(data_dir, entry["moving_labels"]))
            flab, _ = read_volume(os.path.join(data_dir, entry["fixed_labels"]))
            pairs.append(
                (
                    LabeledVolume(intensity=mov, labels=mlab),
                    LabeledVolume(intensity=fix, labels=flab),
                )
            )
        else:
            pairs.append((mov, fix))
    return pairs


def cmd_train(args):
    from .network import CascadeNetwork
    from .report import render_loss_figure
    from .training import train
    from .volio import parse_run_config, save_checkpoint

    manifest = _load_manifest(args.data)
    cfg_text = ""
    if args.config:
        with open(args.config) as fh:
            cfg_text = fh.read()
    net_cfg, loss_cfg, train_opts = parse_run_config(cfg_text)
    pairs = _load_pairs(args.data, manifest)
    model = CascadeNetwork(net_cfg, seed=args.seed)
    log_path = args.log or (args.out + ".log")
    records = []
    with open(log_path, "w") as log_fh:
        header = {
            "lambda": loss_cfg.lam,
            "learning_rate": train_opts["learning_rate"],
            "search_range": net_cfg.search_range,
            "levels": net_cfg.levels,
            "ablation": net_cfg.ablation,
            "steps": args.steps,
            "seed": args.seed,
        }
        log_fh.write(json.dumps({"header": header}) + "\n")

        def log_fn(rec):
            records.append(rec)
            log_fh.write(rec.to_json() + "\n")

        def checkpoint_fn(step, m):
            save_checkpoint(args.out, net_cfg, m.state_dict())

        train(
            model,
            pairs,
            loss_cfg,
            steps=args.steps,
            lr=train_opts["learning_rate"],
            seed=args.seed,
            checkpoint_every=train_opts["checkpoint_every"],
            checkpoint_fn=checkpoint_fn,
            log_fn=log_fn,
        )
    save_checkpoint(args.out, net_cfg, model.state_dict())
    if records:
        render_loss_figure(log_path + ".png", records)
        print(f"trained {args.steps} steps; final loss {records[-1].total:.6f}")
    else:
        print("0 steps requested; wrote the freshly initialized checkpoint")
    print(f"checkpoint: {args.out}\nlog: {log_path}")
    return 0


def cmd_register(args):
    import numpy as np

    from .errors import ShapeMismatchError
    from .network import CascadeNetwork
    from .regops import warp
    from .report import dump_slices
    from .tensor import Tensor, avg_downsample2
    from .volio import load_checkpoint, read_volume, write_volume

    net_cfg, state = load_checkpoint(args.ckpt)
    moving, _ = read_volume(args.moving)
    fixed, _ = read_volume(args.fixed)
    if moving.shape != fixed.shape:
        raise ShapeMismatchError(
            f"moving dims {moving.shape} != fixed dims {fixed.shape}"
        )
    model = CascadeNetwork(net_cfg, seed=0)
    model.load_state_dict(state)
    mov_t = Tensor(moving.astype(np.float32))
    fields = model.forward(mov_t, Tensor(fixed.astype(np.float32)))
    warped = warp(mov_t, fields[0])
    write_volume(args.out_field, fields[0].data)
    write_volume(args.out_warped, warped.data)
    if args.dump_slices:
        level_imgs = [warped.data]
        im = mov_t
        for lvl in range(2, net_cfg.levels + 1):
            im = avg_downsample2(im)
            level_imgs.append(warp(im, Tensor(fields[lvl - 1].data)).data)
        dump_slices(args.dump_slices, level_imgs, [f.data for f in fields])
    print(f"field: {args.out_field}\nwarped: {args.out_warped}")
    return 0


def cmd_eval(args):
    from .network import CascadeNetwork
    from .report import render_eval_figure, write_eval_report
    from .synth import evaluate
    from .volio import load_checkpoint

    manifest = _load_manifest(args.data)
    net_cfg, state = load_checkpoint(args.ckpt)
    model = CascadeNetwork(net_cfg, seed=0)
    model.load_state_dict(state)
    pairs = _load_pairs(args.data, manifest, with_labels=True)
    rows, aggregate = evaluate(model, pairs)
    write_eval_report(args.report, rows, aggregate)
    render_eval_figure(args.report + ".png", rows, aggregate)
    print(
        "pairs={pairs} identity_mean={identity_mean:.4f} model_mean={model_mean:.4f}".format(
            **aggregate
        )
    )
    print(f"report: {args.report}\nfigure: {args.report}.png")
    return 0


def cmd_gradcheck(args):
    from .suite import TOLERANCE, build_checks, run_suite

    if args.op is not None and args.op not in build_checks(0):
        print(f"unknown op '{args.op}'; known: {sorted(build_checks(0))}", file=sys.stderr)
        return 2
    results = run_suite(seed=args.seed, op=args.op)
    failed = False
    for name, err in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:20s} max_rel_err={err:.3e}  {status}")
        failed = failed or err >= TOLERANCE
    return 1 if failed else 0


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from .errors import CascadeWarpError

    handlers = {
        "synth": cmd_synth,
        "train": cmd_train,
        "register": cmd_register,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](args)
    except (CascadeWarpError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
