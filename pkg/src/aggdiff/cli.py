"""Command-line driver: run, check, converge, and sweep experiment configs.

Exit code 0 only when every hard diagnostic of the run passed.  The output
root defaults to the config's ``output.dir`` and can be redirected with the
``AGGDIFF_OUTPUT_ROOT`` environment variable.
"""
from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, parse_config, check_hypotheses
from .runner import run, convergence_study


def _load(path: str):
    with open(path) as fh:
        return parse_config(fh.read())


def _out_dir(config) -> str:
    root = os.environ.get("AGGDIFF_OUTPUT_ROOT")
    return os.path.join(root, config.output_dir) if root else config.output_dir


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="aggdiff",
        description="Radial fast-diffusion aggregation equation laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute the config's mode")
    p_run.add_argument("config")
    p_check = sub.add_parser("check", help="parse and report hypotheses")
    p_check.add_argument("config")
    p_conv = sub.add_parser("converge", help="grid refinement study")
    p_conv.add_argument("config")
    p_conv.add_argument("--levels", type=int, default=3)
    p_sweep = sub.add_parser("sweep", help="run the config's parameter sweep")
    p_sweep.add_argument("config")

    args = parser.parse_args(argv)
    try:
        config = _load(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2

    if args.command == "check":
        report = check_hypotheses(config)
        for name in sorted(report):
            v = report[name]
            line = f"{name}: {v.status:14s} {v.detail}"
            if v.witness is not None:
                line += f" (witness r={v.witness:.4g})"
            print(line)
        return 0

    if args.command == "converge":
        table = convergence_study(config, args.levels)
        print("cells:", table["n_cells"])
        ok = True
        for row in table["orders"]:
            name, orders = row[0], row[1:]
            errs = table["errors"][name]
            print(f"{name:18s} errors {['%.3e' % e for e in errs]} "
                  f"orders {['%.2f' % o for o in orders]}")
            ok = ok and all(o >= 0.9 or o == float("inf") for o in orders)
        return 0 if ok else 1

    if args.command == "sweep" and config.mode != "sweep":
        print("config mode must be 'sweep' for the sweep command", file=sys.stderr)
        return 2

    manifest = run(config, out_dir=_out_dir(config))
    for d in manifest.diagnostics:
        margin = "" if d.margin is None else f" margin={d.margin:.3e}"
        print(f"{d.name}: {d.status}{margin}  {d.detail}")
    print(f"run {manifest.run_id}: {'ok' if manifest.ok else 'FAILED'}")
    return 0 if manifest.ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
