"""Compare alignment methods on small trained MLP pairs (synthetic blobs).

For each pair prints the midpoint barrier after: no alignment, functional-difference
matching, grid matching, reduced SA, and exhaustive search (the optimum).
"""
import argparse

from permbasin import labhub
from permbasin.datahub import load_dataset
from permbasin.labhub import ExperimentSpec
from permbasin.permalg import identity_perm
from permbasin.permsearch import SAConfig, brute_force_match, fd_align, reduced_energy, sa_search_reduced


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width", type=int, default=4)
    ap.add_argument("--pairs", type=int, default=10)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    desc = {"name": "blobs", "n": 1000, "d": 10, "classes": 4, "separation": 2.0, "seed": 0}
    spec = ExperimentSpec(name="search", widths=(args.width,), dataset=desc, n_seeds=2 * args.pairs,
                          master_seed=args.seed, train={"lr": 0.05, "max_epochs": 200})
    nets, _ = labhub.real_world_set(spec)
    ds = load_dataset(desc)
    print(f"{'pair':>4} {'identity':>9} {'fd':>9} {'grid':>9} {'sa':>9} {'brute':>9}")
    for k in range(len(nets) // 2):
        a, b = nets[2 * k], nets[2 * k + 1]
        energy = reduced_energy(a, b, ds)
        row = [energy([identity_perm(a)]), energy([fd_align(a, b, ds)]),
               energy([labhub.grid_align(a, b, args.seed)]),
               sa_search_reduced(a, b, ds, SAConfig(steps=args.steps, seed=k)).final_energy]
        row.append(brute_force_match(a, b, ds).final_energy if args.width <= 8 else float("nan"))
        print(f"{k:>4} " + " ".join(f"{v:9.4f}" for v in row))


if __name__ == "__main__":
    main()
