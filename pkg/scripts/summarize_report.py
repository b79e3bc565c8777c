"""Print the aggregate table stored in a report JSON file."""
import json
import sys


def main():
    for path in sys.argv[1:]:
        data = json.load(open(path))
        print(f"== {data['name']}")
        for g in data["aggregate"]:
            print(f"  {g['set']:>9} {str(g['param']):>8} {g['phase']:<14} {g['metric']:<18} {g['split']:<5} "
                  f"n={g['n']:<3} mean={g['mean']:.4f} std={g['std']:.4f}")


if __name__ == "__main__":
    main()
