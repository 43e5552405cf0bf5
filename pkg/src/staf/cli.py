"""Command-line entry point: ``staf <experiment> [options]``.

Examples::

    staf success-rate --n 100 --m-over-n 1 2 3 4 --trials 50 --out sr.csv
    staf trace --m-over-n 5 --passes 300 --format json --out trace.json
    staf cdp-image --K 8 --passes 300 --out cdp.csv     # also writes cdp_K8.png
    staf noise --config noise.json --trials 10
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .bench import KINDS, ExperimentSpec, emit, run_experiment

log = logging.getLogger("staf")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment spec; command-line flags override it")
    p.add_argument("--n", type=int, help="signal dimension")
    p.add_argument("--m-over-n", type=float, nargs="+", dest="m_over_n",
                   help="measurement ratio(s); the grid for most experiments")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per grid point")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--field", choices=["real", "complex"])
    p.add_argument("--step-rule", choices=["constant", "kaczmarz"], dest="step_rule")
    p.add_argument("--sampling", choices=["uniform", "norm", "cyclic"])
    p.add_argument("--gamma", type=float, help="truncation threshold (default 0.7)")
    p.add_argument("--mu", type=float, help="constant step size (default 0.8/n real, 1.2/n complex)")
    p.add_argument("--passes", type=float, help="refinement budget in data passes")
    p.add_argument("--target", type=float, dest="target_rel_err",
                   help="stop a trial once its relative error is below this")
    p.add_argument("--init", choices=["vr_opi", "power", "truth"], dest="init_solver",
                   help="initialization solver ('truth' starts at the true signal)")
    p.add_argument("--init-passes", type=int, dest="init_passes")
    p.add_argument("--init-fraction", type=float, dest="init_fraction",
                   help="fraction of equations kept by the initialization (default 1/6)")
    p.add_argument("--eta", type=float, help="variance-reduced solver step")
    p.add_argument("--workers", type=int, help="worker threads for trials")
    p.add_argument("--out", help="output file (default: stdout)")
    p.add_argument("--format", choices=["csv", "json"])
    p.add_argument("--save-config", dest="save_config",
                   help="write the resolved spec to this JSON file")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="staf", description="Phase retrieval experiments.")
    sub = parser.add_subparsers(dest="kind", required=True, metavar="EXPERIMENT")
    helps = {
        "success-rate": "empirical success rate versus m/n",
        "trace": "relative error per pass for both step rules",
        "eigengap": "normalised eigengap of the initialization matrix versus m/n",
        "init-race": "power method versus variance-reduced eigen-solver",
        "noise": "relative error per pass under amplitude noise",
        "cdp-image": "coded diffraction recovery of an RGB image",
    }
    for kind in KINDS:
        p = sub.add_parser(kind, help=helps[kind])
        _common(p)
        if kind == "noise":
            p.add_argument("--sigma", type=float, nargs="+", help="noise level(s); the grid")
        else:
            p.add_argument("--sigma", type=float, help="noise level")
        if kind == "cdp-image":
            p.add_argument("--K", type=int, nargs="+", help="number(s) of masks; the grid")
            p.add_argument("--image", help="input PNG (default: synthetic gradient image)")
            p.add_argument("--size", type=int, dest="image_size", help="synthetic image side")
            p.add_argument("--image-out", dest="image_out", help="recovered PNG path")
    return parser


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    base = ExperimentSpec.load(args.config).to_dict() if args.config else {"kind": args.kind}
    if base.get("kind") != args.kind:
        raise ValueError(f"config is for {base.get('kind')!r}, not {args.kind!r}")
    ratios = args.m_over_n
    if args.kind == "noise":
        if args.sigma is not None:
            base["grid"] = args.sigma
        if ratios is not None:
            base["m_over_n"] = ratios[0]
    elif args.kind == "cdp-image":
        if args.K is not None:
            base["grid"] = [float(k) for k in args.K]
        if args.sigma is not None:
            base["sigma"] = args.sigma
    else:
        if ratios is not None:
            base["grid"] = ratios
        if args.sigma is not None:
            base["sigma"] = args.sigma
    for key in ("n", "trials", "seed", "field", "step_rule", "sampling", "gamma", "mu",
                "passes", "target_rel_err", "init_solver", "init_passes", "init_fraction",
                "eta", "workers", "out", "format", "image", "image_size", "image_out"):
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    return ExperimentSpec.from_dict(base)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = spec_from_args(args)
        if args.save_config:
            spec.save(args.save_config)
        log.info("experiment spec: %s", spec.to_dict())
        table = run_experiment(spec)
        text = emit(table, spec.format, spec.out)
        if spec.out is None:
            sys.stdout.write(text)
    except (ValueError, OSError, ArithmeticError, KeyError) as exc:
        print(f"staf: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
