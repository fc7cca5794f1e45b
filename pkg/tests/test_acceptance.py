"""Acceptance gate: one test per criterion, each printing a pass line.

The heavyweight desk-scale experiments (recovery and ablation ordering)
share session fixtures so the suite stays within its runtime budget.
"""

import filecmp
import time

import numpy as np
import pytest

from cascadewarp.cli import main as cli_main
from cascadewarp.network import CascadeNetwork, NetworkConfig
from cascadewarp.regops import correlation, diffusion_reg, nlcc, warp, warp_labels
from cascadewarp.suite import run_suite
from cascadewarp.synth import SynthDeformSpec, dice, evaluate, make_pair, make_phantom
from cascadewarp.tensor import Tensor, conv3d
from cascadewarp.training import LossConfig, train
from oracles import (
    conv3d_naive,
    correlation_naive,
    diffusion_naive,
    nlcc_naive,
    warp_naive,
)

GRAD_TOL = 1e-5
ORACLE_TOL = 1e-5

RECOVERY_DIMS = (24, 24, 24)
RECOVERY_PAIRS = 20
RECOVERY_STEPS = 500
RECOVERY_LR = 1e-3

ABLATION_DIMS = (16, 16, 16)
ABLATION_TRAIN_PAIRS = 10
ABLATION_TEST_PAIRS = 8
ABLATION_STEPS = 500
ABLATION_MAX_DISP = 3.0
ABLATION_SEEDS = (0, 1, 2)


def _build_pairs(n, dims, seed0, max_disp=2.5):
    labeled, arrays, truths = [], [], []
    for k in range(n):
        base = make_phantom(dims, 4, seed=seed0 + k)
        mov, fix, truth = make_pair(
            base, SynthDeformSpec(spacing=8, max_disp=max_disp, seed=seed0 + 500 + k)
        )
        labeled.append((mov, fix))
        arrays.append((mov.intensity, fix.intensity))
        truths.append(truth)
    return labeled, arrays, truths


@pytest.fixture(scope="session")
def recovery_run():
    labeled, arrays, truths = _build_pairs(RECOVERY_PAIRS, RECOVERY_DIMS, seed0=1000)
    model = CascadeNetwork(NetworkConfig(), seed=0)
    _, before = evaluate(model, labeled)
    records = train(
        model, arrays, LossConfig(), steps=RECOVERY_STEPS, lr=RECOVERY_LR, seed=0
    )
    _, after = evaluate(model, labeled)
    return {
        "labeled": labeled,
        "truths": truths,
        "records": records,
        "identity_dice": before["identity_mean"],
        "model_dice": after["model_mean"],
    }


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results.values())
    assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"
    for name, err in results.items():
        assert err < GRAD_TOL, f"{name}: {err:.3e}"
    print(f"\nPASS criterion 1: gradient suite, worst rel err {worst:.3e} in {elapsed:.1f}s")


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0

    def check(actual, expected):
        nonlocal worst
        scale = max(np.abs(expected).max(), 1.0)
        err = np.abs(np.asarray(actual) - expected).max() / scale
        worst = max(worst, err)
        assert err < ORACLE_TOL

    for _ in range(20):
        x = rng.standard_normal((2, 4, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        b = rng.standard_normal(2)
        check(conv3d(Tensor(x), Tensor(w), Tensor(b)).data, conv3d_naive(x, w, b))

        f = rng.standard_normal((2, 4, 4, 4))
        fld = rng.uniform(-1.2, 1.2, size=(3, 4, 4, 4))
        check(warp(Tensor(f), Tensor(fld)).data, warp_naive(f, fld))

        a = rng.standard_normal((2, 3, 3, 3))
        bb = rng.standard_normal((2, 3, 3, 3))
        check(correlation(Tensor(a), Tensor(bb), 1).data, correlation_naive(a, bb, 1))

        m = rng.standard_normal((1, 5, 5, 5))
        ff = rng.standard_normal((1, 5, 5, 5))
        check(float(nlcc(Tensor(m), Tensor(ff), 3).data), np.asarray(nlcc_naive(m, ff, 3)))

        fld2 = rng.standard_normal((3, 4, 4, 4))
        check(float(diffusion_reg(Tensor(fld2)).data), np.asarray(diffusion_naive(fld2)))
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, f"oracle suite took {elapsed:.1f}s"
    print(f"\nPASS criterion 2: 20x5 oracle equivalence, worst rel err {worst:.3e} in {elapsed:.1f}s")


def test_criterion_3_identity_at_init():
    rng = np.random.default_rng(3)
    model = CascadeNetwork(NetworkConfig(), seed=7)
    moving = Tensor(rng.uniform(0, 1, size=(1, 16, 16, 16)).astype(np.float32))
    fixed = Tensor(rng.uniform(0, 1, size=(1, 16, 16, 16)).astype(np.float32))
    fields = model.forward(moving, fixed)
    assert not fields[0].data.any()
    warped = warp(moving, fields[0])
    assert np.array_equal(warped.data, moving.data)
    print("\nPASS criterion 3: zero-init cascade is the bit-exact identity")


def test_criterion_4_shape_ladder():
    rng = np.random.default_rng(4)
    model = CascadeNetwork(NetworkConfig(), seed=0)
    img = Tensor(rng.uniform(0, 1, size=(1, 32, 32, 32)).astype(np.float32))
    feats = model.encode(img)
    assert [f.shape[1:] for f in feats] == [(32, 32, 32), (16, 16, 16), (8, 8, 8)]
    fields = model.forward(img, img)
    assert [p.shape[1:] for p in fields] == [(32, 32, 32), (16, 16, 16), (8, 8, 8)]
    cost = correlation(feats[0], feats[0], 1)
    assert cost.shape[0] == 27
    print("\nPASS criterion 4: 32/16/8 pyramid and 27-channel cost volume")


def test_criterion_5_desk_scale_recovery(recovery_run):
    gain = recovery_run["model_dice"] - recovery_run["identity_dice"]
    assert gain >= 0.10, (
        f"dice gain {gain:.3f} (identity {recovery_run['identity_dice']:.3f}, "
        f"model {recovery_run['model_dice']:.3f})"
    )
    for (mov, fix), truth in zip(recovery_run["labeled"], recovery_run["truths"]):
        _, mean = dice(warp_labels(mov.labels, Tensor(truth)), fix.labels)
        assert mean == 1.0
    print(
        f"\nPASS criterion 5: {RECOVERY_STEPS} steps raise dice "
        f"{recovery_run['identity_dice']:.3f} -> {recovery_run['model_dice']:.3f} "
        f"(+{gain:.3f}); truth field gives dice 1.0"
    )


def test_criterion_6_ablation_ordering():
    train_lab, train_arr, _ = _build_pairs(
        ABLATION_TRAIN_PAIRS, ABLATION_DIMS, seed0=30000, max_disp=ABLATION_MAX_DISP
    )
    test_lab, _, _ = _build_pairs(
        ABLATION_TEST_PAIRS, ABLATION_DIMS, seed0=40000, max_disp=ABLATION_MAX_DISP
    )
    medians = {}
    for ablation in ("full", "baseline2", "baseline1"):
        scores = []
        for seed in ABLATION_SEEDS:
            model = CascadeNetwork(NetworkConfig(ablation=ablation), seed=seed)
            train(model, train_arr, LossConfig(), steps=ABLATION_STEPS, lr=1e-3, seed=seed)
            _, agg = evaluate(model, test_lab)
            scores.append(agg["model_mean"])
        medians[ablation] = float(np.median(scores))
    slack = 0.005
    assert medians["full"] >= medians["baseline2"] - slack, medians
    assert medians["baseline2"] >= medians["baseline1"] - slack, medians
    assert medians["full"] - medians["baseline1"] >= 0.02, medians
    print(
        "\nPASS criterion 6: ablation ordering full {full:.3f} >= "
        "baseline2 {baseline2:.3f} >= baseline1 {baseline1:.3f}".format(**medians)
    )


def test_criterion_7_loss_accounting(recovery_run):
    cfg = LossConfig()
    bound = -sum(cfg.level_weight(i) for i in (1, 2, 3))
    for rec in recovery_run["records"]:
        recomposed = rec.weighted_total(cfg)
        assert abs(rec.total - recomposed) <= 1e-6 * max(1.0, abs(rec.total)), rec.step
        assert rec.total >= bound, rec.step
    print(
        f"\nPASS criterion 7: loss decomposition holds to 1e-6 over "
        f"{len(recovery_run['records'])} steps; bound {bound} respected"
    )


def test_criterion_8_determinism(tmp_path):
    data = tmp_path / "data"
    rc = cli_main(
        ["synth", "--out", str(data), "--pairs", "2", "--dims", "16,16,16",
         "--labels", "3", "--max-disp", "2.0", "--seed", "11"]
    )
    assert rc == 0
    ckpts, reports = [], []
    for name in ("a", "b"):
        ckpt = tmp_path / f"{name}.ckpt"
        report = tmp_path / f"{name}.tsv"
        rc = cli_main(
            ["--threads", "1", "train", "--data", str(data), "--steps", "5",
             "--seed", "3", "--out", str(ckpt), "--log", str(tmp_path / f"{name}.log")]
        )
        assert rc == 0
        rc = cli_main(
            ["--threads", "1", "eval", "--data", str(data), "--ckpt", str(ckpt),
             "--report", str(report)]
        )
        assert rc == 0
        ckpts.append(ckpt)
        reports.append(report)
    assert filecmp.cmp(ckpts[0], ckpts[1], shallow=False)
    assert filecmp.cmp(reports[0], reports[1], shallow=False)
    print("\nPASS criterion 8: byte-identical checkpoints and reports across seeded runs")
