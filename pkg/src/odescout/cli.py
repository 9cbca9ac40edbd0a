"""Command line entry point: ``odescout {generate,discover,fit,evaluate,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agents import ScriptedSampler, ScriptedScientist
from .benchmarks import REGIMES, SYSTEMS, generate_dataset, get_system, read_dataset, write_dataset
from .evaluation import evaluate_system, nmse_success_test, term_match_test
from .expression import build_skeleton
from .fitted import FittedSystem, dim_name, parse_dim_name, read_equation_file, write_equation_file
from .optimizer import (
    OptimizerConfig,
    optimize_best_of_three,
    optimize_bfgs,
    optimize_de,
    optimize_hybrid,
    write_trace,
)
from .search import SearchConfig, run_repeats

FITTERS = {
    "bfgs": optimize_bfgs,
    "de": optimize_de,
    "hybrid": optimize_hybrid,
    "best": optimize_best_of_three,
}


def _data_args(p: argparse.ArgumentParser) -> None:
    # None means "not given" so that --config values are not shadowed
    p.add_argument("--system", type=int, choices=sorted(SYSTEMS), help="benchmark id (default 2)")
    p.add_argument("--regime", choices=REGIMES, help="ID (default) or ID-Ext")
    p.add_argument("--sigma", type=float, help="std of additive state noise (default 0)")
    p.add_argument("--ic", type=int, help="initial-condition index (default 0)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--data", help="load a dataset CSV instead of generating one")


_DATA_DEFAULTS = {"system": 2, "regime": "ID", "sigma": 0.0, "ic": 0, "seed": 0}
_OPT_DEFAULTS = {"lower": -20.0, "upper": 20.0, "de_maxiter": 1000, "timeout": 240.0}


def _fill_defaults(args, defaults: dict) -> None:
    for k, v in defaults.items():
        if getattr(args, k, None) is None:
            setattr(args, k, v)


def _load_data(args):
    if args.data:
        return read_dataset(args.data)
    return generate_dataset(args.system, args.regime, args.sigma, args.ic, args.seed)


def _optimizer_config(args) -> OptimizerConfig:
    return OptimizerConfig(bounds=(args.lower, args.upper), de_maxiter=args.de_maxiter,
                           timeout=args.timeout)


def _opt_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lower", type=float, help="lower DE bound (default -20)")
    p.add_argument("--upper", type=float, help="upper DE bound (default 20)")
    p.add_argument("--de-maxiter", type=int, help="DE generation limit (default 1000)")
    p.add_argument("--timeout", type=float, help="seconds per (candidate, dimension) (default 240)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odescout", description="Symbolic ODE discovery")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write benchmark datasets as CSV")
    _data_args(g)
    g.add_argument("--out", required=True, help="output CSV path (a JSON sidecar is written next to it)")

    d = sub.add_parser("discover", help="run the discovery loop")
    _data_args(d)
    _opt_args(d)
    d.add_argument("--config", help="JSON file with SearchConfig fields")
    d.add_argument("--iterations", type=int)
    d.add_argument("--hypotheses", type=int)
    d.add_argument("--backend", choices=["scripted", "live"])
    d.add_argument("--script", help="JSON script for the scripted backend")
    d.add_argument("--endpoint", help="OpenAI-compatible base URL")
    d.add_argument("--model")
    d.add_argument("--api-key-env", help="environment variable holding the API key")
    d.add_argument("--workers", type=int)
    d.add_argument("--repeats", type=int, default=1, help="rerun with incremented seeds, keep the best")
    d.add_argument("--run-dir", required=True)

    f = sub.add_parser("fit", help="fit coefficients of a given skeleton")
    _data_args(f)
    _opt_args(f)
    f.add_argument("--terms", action="append", required=True, metavar="DIM=T1;T2",
                   help='e.g. --terms "x0_t=x0**2;np.sin(x1)" (repeat per dimension)')
    f.add_argument("--strategy", default="hybrid", choices=sorted(FITTERS))
    f.add_argument("--out", help="write the fitted equation file here")
    f.add_argument("--trace", help="append optimizer traces (JSON lines)")

    e = sub.add_parser("evaluate", help="score an equation file against a benchmark")
    _data_args(e)
    e.add_argument("equations", help="equation file (JSON)")
    e.add_argument("--csv", help="also write the NMSE table as CSV")

    r = sub.add_parser("report", help="summarise report.json files")
    r.add_argument("reports", nargs="+", help="report.json files or run directories")
    return parser


# ---------------------------------------------------------------------------

def _parse_terms(items: list[str], dimension: int) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for item in items:
        name, _, rest = item.partition("=")
        j = parse_dim_name(name)
        out[j] = [t.strip() for t in rest.split(";") if t.strip()]
    for j in range(dimension):
        out.setdefault(j, [])
    return out


def cmd_generate(args) -> int:
    data = generate_dataset(args.system, args.regime, args.sigma, args.ic, args.seed)
    write_dataset(args.out, data)
    print(f"wrote {data.n_points} points of system {args.system} ({args.regime}) to {args.out}")
    return 0


def cmd_fit(args) -> int:
    data = _load_data(args)
    cfg = _optimizer_config(args)
    terms = _parse_terms(args.terms, data.dimension)
    eqs, thetas, mses = [], [], []
    trace: list | None = [] if args.trace else None
    for j in range(data.dimension):
        eq = build_skeleton(terms[j], j, dimension=data.dimension)
        res = FITTERS[args.strategy](eq, data, j, config=cfg, seed=args.seed, trace=trace)
        eqs.append(eq)
        thetas.append(res.theta)
        mses.append(res.mse)
        print(f"{dim_name(j)} = {eq.format(res.theta, 6)}   [mse {res.mse:.3e}, {res.strategy}]")
    system = FittedSystem(tuple(eqs), tuple(thetas), tuple(mses))
    if args.out:
        write_equation_file(args.out, system)
    if args.trace:
        write_trace(args.trace, trace)
    return 0


def cmd_evaluate(args) -> int:
    spec = get_system(args.system)
    system = read_equation_file(args.equations, spec.dimension)
    datasets = {regime: generate_dataset(args.system, regime, args.sigma, args.ic, args.seed)
                for regime in REGIMES}
    rep = evaluate_system(system, datasets)
    payload = {
        "nmse": rep.to_dict(),
        "nmse_success": nmse_success_test(rep),
        "term_success": term_match_test(system, spec, datasets["ID"]),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.csv:
        Path(args.csv).write_text(rep.to_csv(), encoding="utf-8")
    return 0


def _scripted_backends(path: str):
    script = json.loads(Path(path).read_text(encoding="utf-8"))
    schedule = [[{parse_dim_name(k): v for k, v in hyp.items()} for hyp in it] for it in script["sampler"]]
    sci = script.get("scientist", {})
    grades = {parse_dim_name(k): v for k, v in sci.get("grades", {}).items()}

    def factory(_repeat: int):
        return (ScriptedSampler(schedule, cycle=bool(script.get("cycle", False))),
                ScriptedScientist(grades, sci.get("default", "neutral"), sci.get("insight", "")))
    return factory


def cmd_discover(args) -> int:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if args.data:
        print("error: discover generates its own data; --data is not supported here", file=sys.stderr)
        return 2
    overrides = {
        "system_id": args.system, "regime": args.regime, "sigma": args.sigma, "ic_index": args.ic,
        "seed": args.seed, "run_dir": args.run_dir, "iterations": args.iterations,
        "n_hypotheses": args.hypotheses, "backend": args.backend, "endpoint": args.endpoint,
        "model": args.model, "api_key_env": args.api_key_env, "workers": args.workers,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    opt = dict(base.get("optimizer", {}))
    if args.lower is not None or args.upper is not None:
        lo, hi = opt.get("bounds", (-20.0, 20.0))
        opt["bounds"] = [lo if args.lower is None else args.lower, hi if args.upper is None else args.upper]
    if args.de_maxiter is not None:
        opt["de_maxiter"] = args.de_maxiter
    if args.timeout is not None:
        opt["timeout"] = args.timeout
    base["optimizer"] = opt
    config = SearchConfig.from_dict(base)
    factory = None
    if config.backend == "scripted":
        if not args.script:
            print("error: the scripted backend needs --script", file=sys.stderr)
            return 2
        factory = _scripted_backends(args.script)
    best, reports = run_repeats(config, args.repeats, factory)
    if best.best is not None:
        for line in best.best.format(6):
            print(line)
    print(f"NMSE test: {'pass' if best.nmse_success else 'fail'}; "
          f"term test: {'pass' if best.term_success else 'fail'}; tokens: {best.tokens['total_tokens']}")
    if args.repeats > 1:
        idx = reports.index(best)
        print(f"best of {args.repeats} runs: repeat {idx} (seed {config.seed + idx})")
    return 0


def _fmt(v) -> str:
    return "nan" if v is None or not np.isfinite(v) else f"{v:.2e}"


def cmd_report(args) -> int:
    paths = []
    for item in args.reports:
        path = Path(item)
        if path.is_dir():
            # a multi-repeat run keeps one report per repeat_* subdirectory
            found = [path / "report.json"] if (path / "report.json").exists() else \
                sorted(path.glob("repeat_*/report.json"))
            paths.extend(found or [path / "report.json"])
        else:
            paths.append(path)
    rows = []
    for path in paths:
        rep = json.loads(path.read_text(encoding="utf-8"))
        sid = rep["config"]["system_id"]
        nmse = rep.get("nmse") or {}
        rows.append([
            SYSTEMS[sid].name,
            _fmt((nmse.get("ID") or {}).get("residual_mean")),
            _fmt((nmse.get("ID-Ext") or {}).get("residual_mean")),
            _fmt((nmse.get("ID") or {}).get("integral_mean")),
            _fmt((nmse.get("ID-Ext") or {}).get("integral_mean")),
            "pass" if rep["nmse_success"] else "fail",
            "pass" if rep["term_success"] else "fail",
            str(rep["tokens"]["total_tokens"]),
        ])
    header = ["system", "res ID", "res Ext", "int ID", "int Ext", "NMSE test", "term test", "tokens"]
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
    for r in [header] + rows:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("generate", "fit", "evaluate"):
        _fill_defaults(args, _DATA_DEFAULTS)
    if args.command == "fit":
        _fill_defaults(args, _OPT_DEFAULTS)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"generate": cmd_generate, "discover": cmd_discover, "fit": cmd_fit,
               "evaluate": cmd_evaluate, "report": cmd_report}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
