"""Command-line entry point.

Subcommands ``solve``, ``put-option``, ``gaussian-check``, ``validate`` and
``refine`` each read a configuration file and write CSV into ``--out``.
Exit codes: 0 pass, 1 a check failed (or the solver blew up), 2 usage or
configuration error.  The solver thread count comes from ``RADNER_THREADS``.
"""
from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from . import experiments as ex
from .config import ConfigError, parse_config, with_overrides
from .economy import InvalidModelError
from .mc_validator import DomainTooSmallError
from .pde_solver import BlowUpError, InvalidGridError, NonNestedGridError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radner", description="Radner equilibrium PDE solver and validation lab.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "solve": "solve the configured economy and write values and equilibrium quantities at t=0",
        "put-option": "put-option experiment: one CSV per (N, delta1)",
        "gaussian-check": "compare the solver with the Gaussian closed form",
        "validate": "run the validation suite and write validation_report.csv",
        "refine": "spatial refinement study over refine_n_x",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text, description=text)
        sp.add_argument("--config", required=True, type=Path, help="key = value configuration file")
        sp.add_argument("--out", type=Path, default=None, help="output directory (overrides 'out')")
        sp.add_argument("--seed", type=_u64, default=None, help="RNG seed (overrides 'seed')")
        sp.add_argument("--strict", action="store_true", help="treat domain warnings as errors")
    return p


def _load(args):
    try:
        text = args.config.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    cfg = parse_config(text)
    return with_overrides(cfg, seed=args.seed, out=str(args.out) if args.out is not None else None)


def _finish(result) -> int:
    for c in result.report.checks:
        status = "PASS" if c["passed"] else "FAIL"
        print(f"{status} {c['check']}: {c['value']!r} (threshold {c['threshold']!r}) {c['detail']}".rstrip())
    print(f"report: {result.path}")
    return result.exit_code


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.out)
    try:
        with warnings.catch_warnings():
            if args.strict:
                warnings.simplefilter("error", RuntimeWarning)
            if args.command == "solve":
                print(ex.run_solve(cfg, out))
            elif args.command == "put-option":
                if cfg.economy != "put_option":
                    raise ConfigError("put-option needs economy = put_option", "economy")
                for path in ex.run_put_option_experiment(cfg, out):
                    print(path)
            elif args.command == "gaussian-check":
                if cfg.economy != "gaussian":
                    raise ConfigError("gaussian-check needs economy = gaussian", "economy")
                return _finish(ex.run_gaussian_check(cfg, out))
            elif args.command == "validate":
                return _finish(ex.run_validation_suite(cfg, strict=args.strict, out_dir=out))
            elif args.command == "refine":
                rep = ex.run_refine(cfg)
                print(ex.write_refinement(rep, out / "refinement.csv"))
                order = float(rep.min_order.min())
                print(f"min observed order {order!r} (threshold {cfg.refine_min_order!r})")
                return EXIT_OK if order >= cfg.refine_min_order else EXIT_FAIL
    except (ConfigError, InvalidModelError, InvalidGridError, NonNestedGridError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BlowUpError, DomainTooSmallError, RuntimeWarning) as exc:
        print(f"check failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
