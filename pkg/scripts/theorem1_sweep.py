"""Midpoint deviation after grid-bucket matching of random two-layer ReLU nets, for several d."""
import argparse

from permbasin.labhub import theorem1_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--h", type=int, nargs="+", default=[2**6, 2**8, 2**10, 2**12, 2**14])
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for d in args.d:
        s = theorem1_check(d, args.h, args.trials, seed=args.seed).summary
        meds = " ".join(f"{m:.4f}" for m in s["median_deviation"])
        left = " ".join(f"{x:.0f}" for x in s["mean_leftover"])
        print(f"d={d}: median {meds} | leftover {left} | slope {s['slope']:.3f} (bound {s['predicted_rate']:.3f})")


if __name__ == "__main__":
    main()
