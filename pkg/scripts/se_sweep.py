"""
State-evolution sweep over the condition number: predicted NMSE of xhat1
after a fixed number of iterations for each adaptation mode.  No Monte
Carlo, so this runs in seconds.

    python3 scripts/se_sweep.py --kappas 1 10 100 1000 --iters 40
"""

import argparse

import numpy as np

from avamp.model import BgParams, geometric_spectrum, noise_precision_for_snr
from avamp.state_evolution import se_config_for_mode, se_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--kappas", type=float, nargs="+", default=[1, 3, 10, 30, 100, 300, 1000])
    ap.add_argument("--m", type=int, default=512)
    ap.add_argument("--n", type=int, default=1024)
    ap.add_argument("--snr-db", type=float, default=40.0)
    ap.add_argument("--iters", type=int, default=40)
    ap.add_argument("--modes", nargs="+", default=["oracle", "em", "autotune"])
    args = ap.parse_args()

    th = BgParams(0.1, 0.0, 1.0)
    print("kappa " + " ".join(f"{m:>12s}" for m in args.modes))
    for kappa in args.kappas:
        s = np.zeros(args.n)
        s[: args.m] = geometric_spectrum(args.m, args.n, kappa).values
        t2 = noise_precision_for_snr(s, args.m, th, args.snr_db)
        vals = []
        for mode in args.modes:
            states = se_run(se_config_for_mode(mode, th, t2, s, args.m, args.iters))
            last = states[-1]
            vals.append(f"{last.nmse1_db:12.2f}" if last.valid and len(states) == args.iters else f"{'invalid':>12s}")
        print(f"{kappa:5g} " + " ".join(vals))


if __name__ == "__main__":
    main()
