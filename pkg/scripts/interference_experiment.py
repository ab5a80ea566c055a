"""Train baseline and alpha-swept proposed models on source-domain data; score both on the shifted domain.

    python3 scripts/interference_experiment.py --out runs/interference [--repro]

With ``--repro`` the baseline and the selected proposed run are trained a second
time and their history digests and per-image Dice compared bitwise.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from birads_mtl import experiment as X
from birads_mtl.metrics import summary_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None, help="keep run directories and summary.json here")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--alphas", type=float, nargs="+", default=list(X.ALPHA_GRID))
    ap.add_argument("--repro", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    data = X.ExperimentData.desk()
    config = X.base_config(seed=args.seed)
    res = X.run_experiment(config, data, grid=args.alphas, out_dir=args.out)
    summary = res.summary()
    print(f"baseline  mean Dice {res.baseline.mean_dice:.4f}  test AUC {res.baseline.test_auc:.4f}")
    print(f"proposed  mean Dice {res.proposed.mean_dice:.4f}  test AUC {res.proposed.test_auc:.4f}"
          f"  (alpha {res.proposed.alpha:g})")
    if res.wilcoxon is not None:
        print(f"wilcoxon  W {res.wilcoxon.statistic:g}  p {res.wilcoxon.p_value:.3g}"
              f"  n {res.wilcoxon.n_effective}")
    print(f"runtime   {res.seconds:.1f} s")
    print()
    print(summary_table({"baseline": (res.baseline.mean_dice, res.baseline.test_auc),
                         f"proposed (alpha {res.proposed.alpha:g})":
                             (res.proposed.mean_dice, res.proposed.test_auc)}))

    if args.repro:
        t0 = time.perf_counter()
        again_b = X.run_baseline(config, data)
        again_p = X.run_proposed(config, res.proposed.alpha, data)
        same = (again_b.history_sha256 == res.baseline.history_sha256
                and again_p.history_sha256 == res.proposed.history_sha256
                and again_b.test_dice == res.baseline.test_dice
                and again_p.test_dice == res.proposed.test_dice)
        summary["repro"] = {"identical": same, "seconds": time.perf_counter() - t0}
        print(f"repro     identical={same}  ({summary['repro']['seconds']:.1f} s)")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
