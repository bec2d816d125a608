"""kdstream command line: ``kdstream run <command> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import (KEYS, STAGES, ConfigError, ExperimentConfig, LockedError, MissingStageError,
                       run_stage)

FLAG_KEYS = {"seed": "seed", "out": "out", "hist": "hist", "chunk": "chunk", "alpha": "alpha",
             "beta": "beta"}


def keys_read(name: str) -> list[str]:
    """Config keys that determine a command's outputs, its upstream stages included."""
    seen, todo, keys = set(), [name], set()
    while todo:
        st = STAGES[todo.pop()]
        if st.name in seen:
            continue
        seen.add(st.name)
        keys.update(st.keys)
        todo.extend(st.needs)
    keys.add("out")
    return [k for k in KEYS if k in keys]


def _epilog(name: str) -> str:
    lines = ["config keys read (default):"]
    for k in keys_read(name):
        lines.append(f"  {k} = {KEYS[k].default or '(empty)'}    {KEYS[k].help}")
    needs = STAGES[name].needs
    lines.append("requires stage: " + (", ".join(needs) if needs else "none"))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kdstream", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    top = parser.add_subparsers(dest="top", required=True)
    run = top.add_parser("run", help="run one pipeline stage")
    commands = run.add_subparsers(dest="command", required=True, metavar="command")
    for name, st in STAGES.items():
        p = commands.add_parser(name, help=st.doc.splitlines()[0], description=st.doc,
                                epilog=_epilog(name),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="run directory; outputs go to <out>/<stage>/")
        p.add_argument("--hist", help="history frames (int or inf)")
        p.add_argument("--chunk", help="chunk frames (int or inf)")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
    top.add_parser("defaults", help="print the default config")
    return parser


def overrides(args: argparse.Namespace) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            out[key] = str(v)
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.top == "defaults":
        sys.stdout.write(ExperimentConfig().to_text())
        return 0
    try:
        cfg = ExperimentConfig.load(args.config, overrides(args))
        summary = run_stage(args.command, cfg)
    except (ConfigError, LockedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except MissingStageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps({args.command: summary}, sort_keys=True))
    if args.command == "gradcheck":
        print(f"max rel err {summary['max_rel_err']:.3e}")
        if not summary["ok"]:
            print("error: gradient check failed", file=sys.stderr)
            return 1
    return 0
