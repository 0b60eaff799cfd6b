"""
Run both large-system presets (kappa = 100 and 10), then print the
per-mode SE deviation and the final median NMSE.

    python3 scripts/run_appendix_g.py --trials 100 --threads 4 --out out
"""

import argparse
from dataclasses import replace
from pathlib import Path

from avamp.harness import compare_rows, preset, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--trials", type=int, default=100)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out")
    args = ap.parse_args()

    for name in ("appendix-g-k100", "appendix-g-k10"):
        cfg = replace(preset(name), n_trials=args.trials, master_seed=args.seed)
        rows, summary = run_experiment(cfg, Path(args.out) / name, threads=args.threads)
        print(f"\n{name}  ({summary['timings']['total_s']:.1f} s)")
        print(f"{'mode':12s} {'final median':>13s} {'final SE':>9s} {'max dev':>8s} {'failures':>9s}")
        cmp = compare_rows(rows)
        for mode in cfg.modes:
            last = [r for r in rows if r["mode"] == mode][-1]
            print(f"{mode:12s} {last['nmse_db_median']:13.2f} {last['se_nmse_db']:9.2f} "
                  f"{cmp[mode][1]:8.3f} {summary['failures'][mode]:9d}")


if __name__ == "__main__":
    main()
