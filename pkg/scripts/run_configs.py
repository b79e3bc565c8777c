"""Run one or more experiment configs and print the aggregated barrier table.

    python3 scripts/run_configs.py configs/compare_s_sprime.yaml configs/sa_scaling.yaml --out-dir out
"""
import argparse
import time

from permbasin import labhub, runtime


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("configs", nargs="+")
    ap.add_argument("--out-dir", default="out")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    runtime.set_threads(args.threads)
    for path in args.configs:
        spec = labhub.load_spec(path)
        start = time.perf_counter()
        report = labhub.run_experiment(spec)
        csv_path, _ = report.write(args.out_dir)
        print(f"== {spec.name} ({spec.kind}) {time.perf_counter() - start:.0f}s -> {csv_path}")
        for g in report.aggregate():
            print(f"  {g['set']:>9} {str(g['param']):>8} w={g['width']:<5} d={g['depth']} {g['phase']:<14} "
                  f"{g['metric']:<18} {g['split']:<5} n={g['n']:<3} mean={g['mean']:.4f} std={g['std']:.4f}")


if __name__ == "__main__":
    main()
