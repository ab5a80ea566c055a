"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (criterion 6 takes roughly 15 minutes
on one core; deselect it with ``-m "not slow"``).
"""
import itertools
import time

import numpy as np
import pytest

from birads_mtl import autodiff as ad
from birads_mtl import cli
from birads_mtl import experiment as X
from birads_mtl import features as F
from birads_mtl import gradcheck as gc
from birads_mtl import synthetic as S
from birads_mtl.losses import LossBreakdown, LossHyper, SampleTargets, total_loss
from birads_mtl.metrics import auc, average_ranks, dice, wilcoxon_signed_rank
from birads_mtl.model import from_bytes, load_checkpoint, to_bytes
from birads_mtl.prior import BIRADS_INIT, PriorWeights, composite_score, init_weights
from birads_mtl.trainer import ArraySet, evaluate


def report(capsys, number, name, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})")
    assert ok, detail


def test_criterion_1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    reports = gc.run_suite(seed=0, instances=10, probes=20, size=16, step=1e-5)
    seconds = time.perf_counter() - t0
    worst = max(reports.items(), key=lambda kv: kv[1].max_rel_err)
    ok = (set(reports) == set(gc.TARGETS) and all(r.passed(1e-4) for r in reports.values())
          and seconds < 120)
    report(capsys, 1, "gradient fidelity", ok,
           f"worst {worst[0]} rel err {worst[1].max_rel_err:.2e}, {seconds:.1f} s")


def test_criterion_2_feature_semantics(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    wins = 0
    for k in range(50):
        disc, star = S.disc_star_pair(float(rng.uniform(8, 14)), int(rng.integers(5, 10)),
                                      float(rng.uniform(0.25, 0.5)), seed=k)
        fd = F.raw_features(disc.mask_gt, disc.image)
        fs = F.raw_features(star.mask_gt, star.image)
        wins += fs["R_raw"] > fd["R_raw"] and fs["C"] < fd["C"] and fs["T_raw"] > fd["T_raw"]
    seconds = time.perf_counter() - t0
    report(capsys, 2, "feature semantics", wins >= 48 and seconds < 60,
           f"{wins}/50 pairs ordered, {seconds:.1f} s")


def test_criterion_3_prior_algebra(capsys):
    round_trip = float(np.max(np.abs(init_weights(BIRADS_INIT).w - np.array(BIRADS_INIT))))
    rng = np.random.default_rng(3)
    in_range = monotone = True
    for _ in range(1000):
        pw = PriorWeights(u=ad.parameter(rng.normal(scale=2.0, size=4)))
        f = rng.uniform(size=4)
        phi = composite_score(tuple(f), pw).phi
        in_range &= 0.0 <= phi <= 1.0
        which = int(rng.integers(4))
        g = f.copy()
        g[which] = min(1.0, g[which] + rng.uniform(0.01, 0.5))
        moved = composite_score(tuple(g), pw).phi
        monotone &= moved <= phi + 1e-15 if which == 2 else moved >= phi - 1e-15
    ok = round_trip < 1e-12 and in_range and monotone
    report(capsys, 3, "composite-prior algebra", ok,
           f"round trip {round_trip:.1e}, range {in_range}, monotone {monotone}")


def test_criterion_4_loss_composition(capsys):
    crafted = LossBreakdown.compose(0.2, 0.4, 0.09, 0.0, 1.0, LossHyper()).total
    rng = np.random.default_rng(4)
    mask = np.zeros((16, 16))
    mask[4:11, 5:12] = 1
    image, logits = rng.uniform(size=(16, 16)), rng.normal(size=(16, 16))
    nr, nt = F.EmaNormalizer().update([0.0, 40.0]), F.EmaNormalizer().update([0.0, 0.1])
    pw = PriorWeights(u=ad.parameter(rng.normal(size=4)))
    reduced = total_loss(image, SampleTargets(mask, 1), logits, 0.4, pw,
                         LossHyper(alpha=0.0, beta=0.0), nr, nt).breakdown
    exact = reduced.total == 0.9 * reduced.L_seg + 0.1 * reduced.L_cls
    ok = abs(crafted - 0.2363) <= 1e-12 and exact
    report(capsys, 4, "loss composition", ok,
           f"crafted {crafted!r}, baseline reduction exact {exact}")


def _wilcoxon_enum(d):
    d = d[d != 0]
    r = average_ranks(np.abs(d))
    w = min(r[d > 0].sum(), r[d < 0].sum())
    hits = sum(1 for s in itertools.product((0, 1), repeat=d.size)
               if r[np.array(s, bool)].sum() <= w + 1e-9)
    return min(1.0, 2 * hits / 2 ** d.size)


def test_criterion_5_statistics_oracles(capsys):
    w_err = a_err = d_err = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 13))
        d = np.round(rng.normal(size=n), 1)
        d[d == 0] = 0.3
        p = wilcoxon_signed_rank(d, np.zeros(n), method="exact").p_value
        w_err = max(w_err, abs(p - _wilcoxon_enum(d)))

        m = int(rng.integers(2, 30))
        labels = rng.integers(0, 2, size=m)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 8, size=m) / 7.0
        pos, neg = scores[labels == 1], scores[labels == 0]
        pairs = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
        a_err = max(a_err, abs(auc(scores, labels) - pairs / (pos.size * neg.size)))

        pred, gt = rng.uniform(size=(9, 7)), rng.uniform(size=(9, 7)) > 0.5
        ps = {tuple(i) for i in np.argwhere(pred >= 0.5)}
        gs = {tuple(i) for i in np.argwhere(gt)}
        oracle = 2 * len(ps & gs) / (len(ps) + len(gs)) if ps or gs else 1.0
        d_err = max(d_err, abs(dice(pred, gt.astype(float)) - oracle))
    ok = w_err < 1e-12 and a_err < 1e-12 and d_err < 1e-12
    report(capsys, 5, "statistics oracles", ok,
           f"max err wilcoxon {w_err:.1e}, auc {a_err:.1e}, dice {d_err:.1e}")


@pytest.mark.slow
def test_criterion_6_interference_experiment(capsys, tmp_path):
    data = X.ExperimentData.desk()
    config = X.base_config(seed=1)
    res = X.run_experiment(config, data, out_dir=tmp_path)
    again_b = X.run_baseline(config, data)
    again_p = X.run_proposed(config, res.proposed.alpha, data)
    same = (again_b.history_sha256 == res.baseline.history_sha256
            and again_p.history_sha256 == res.proposed.history_sha256
            and again_b.test_dice == res.baseline.test_dice
            and again_p.test_dice == res.proposed.test_dice)
    p = "n/a" if res.wilcoxon is None else f"{res.wilcoxon.p_value:.3g}"
    ok = res.passed and same and res.seconds < 15 * 60
    report(capsys, 6, "desk-scale interference experiment", ok,
           f"shifted Dice proposed {res.proposed.mean_dice:.4f} (alpha {res.proposed.alpha:g}) "
           f"vs baseline {res.baseline.mean_dice:.4f}, Wilcoxon p {p}, reproducible {same}, "
           f"{res.seconds:.0f} s")


def test_criterion_7_determinism(capsys, tmp_path):
    argv = ["train", "--seed", "7", "--n-train", "24", "--n-val", "8", "--size", "32",
            "--max-epochs", "3", "--batch-size", "8"]
    codes = [cli.main(argv + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    capsys.readouterr()
    history_same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                       for f in ("history.csv", "epochs.csv"))

    ckpt = load_checkpoint(tmp_path / "a" / "checkpoint.bin")
    test = ArraySet.from_samples(S.make_dataset(12, domain="shifted", seed=9, size=32))
    before = (ckpt.norm_r.state(), ckpt.norm_t.state())
    first, second = evaluate(ckpt, test), evaluate(ckpt, test)
    frozen = first == second and before == (ckpt.norm_r.state(), ckpt.norm_t.state())
    reloaded = evaluate(from_bytes(to_bytes(ckpt)), test)
    round_trip = (reloaded.per_image_dice == first.per_image_dice and reloaded == first)
    ok = codes == [0, 0] and history_same and frozen and round_trip
    report(capsys, 7, "determinism and round-trip", ok,
           f"history identical {history_same}, eval frozen {frozen}, reload bitwise {round_trip}")
