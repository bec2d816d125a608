"""Step-1 objective ablation (M1-M4) over several seeds."""

import argparse
from pathlib import Path

from kdstream.experiments import ablation, ablation_table


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", type=Path, default=Path("runs/compare"))
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    table = ablation(args.root, args.seeds, dict(s.split("=", 1) for s in args.set))
    print(ablation_table(table))
    (args.root / "ablation.txt").write_text(ablation_table(table) + "\n")


if __name__ == "__main__":
    main()
