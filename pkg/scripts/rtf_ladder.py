"""Single-thread RTF of the teacher analog and the S1-S5 student ladder."""

import argparse
from pathlib import Path

from kdstream.experiments import rtf_ladder


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--root", type=Path, default=Path("runs/rtf"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args()
    rtf = rtf_ladder(args.root, overrides=dict(s.split("=", 1) for s in args.set))
    for name, value in rtf.items():
        print(f"{name:3} {value:.4f}")
    print(f"T/S5 = {rtf['T'] / rtf['S5']:.2f}")


if __name__ == "__main__":
    main()
