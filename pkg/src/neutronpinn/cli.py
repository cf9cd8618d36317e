"""``neutronpinn`` command line: solve, oracle, search, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from ._kernels import tune_allocator
from .autodiff import DivergenceError
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neutronpinn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--problem", choices=("p1", "p2", "p3", "p4"))
        return sp

    common(sub.add_parser("solve", help="train one PINN, write metrics and a checkpoint"))
    sp = common(sub.add_parser("oracle", help="run the reference solver, write the field grid"))
    sp.add_argument("--method", choices=("series", "fdm", "eigen"))
    sp = common(sub.add_parser("search", help="criticality search over k_inf"))
    sp.add_argument("--method", choices=("grid", "binary", "quadfit"))
    sp.add_argument("--keep-runs", action="store_true", help="keep per-candidate training logs")
    common(sub.add_parser("sweep", help="cartesian sweep over the sweep.* lists"))
    sp = sub.add_parser("report", help="merge run CSVs into tables and plot data")
    sp.add_argument("root", help="directory holding run outputs")
    sp.add_argument("--out", help="report directory (default ROOT/report)")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            files = harness.report(args.root, args.out)
            print(f"wrote {len(files)} files")
            return EXIT_OK
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "problem": args.problem})
        if args.command == "solve":
            res = harness.solve(cfg)
            for name, metric, v in res.metrics.rows():
                if metric in ("mse", "mse_final", "e_inf") or name == "k_eff":
                    print(f"{name:8s} {metric:10s} {v:.6e}")
        elif args.command == "oracle":
            grid = harness.oracle(cfg, args.method)
            print(f"oracle grid {'x'.join(map(str, grid.shape))} -> {cfg.out}")
        elif args.command == "search":
            res = harness.search(cfg, args.method, args.keep_runs)
            print(f"k_star = {res.k_star:.7f}  ({len(res.candidates)} networks, {res.method})")
        elif args.command == "sweep":
            rows = harness.sweep(cfg)
            print(f"{len(rows)} sweep cells -> {cfg.out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def main() -> None:
    tune_allocator()
    sys.exit(run())


if __name__ == "__main__":
    main()
