"""Two-step streaming student vs the single-step baseline over several seeds."""

import argparse
from pathlib import Path

from kdstream.experiments import two_step_vs_single


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", type=Path, default=Path("runs/compare"))
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    overrides = dict(s.split("=", 1) for s in args.set)
    cmp = two_step_vs_single(args.root, args.seeds, overrides)
    print(cmp.table())
    print(f"two-step wins {cmp.wins}/{len(cmp.rows)} seeds; {cmp.seconds / 60:.1f} min")
    (args.root / "comparison.txt").write_text(cmp.table() + "\n")


if __name__ == "__main__":
    main()
