"""Command-line front end.

Exit codes: 0 success, 2 input or configuration error, 3 estimation error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

from . import __version__
from .data import load_dataset, validate
from .errors import EstimationError, InputError, NoProxyData, OverlapViolation, TCACEError
from .estimators import proxy_compliance_diagnostic
from .pipeline import METHODS, analyze, fit_nuisance
from .sensitivity import DEFAULT_GRID, SensitivityQuery, benchmark_all, sensitivity_report
from .simulation import (
    ScenarioKind,
    format_study_tables,
    parse_grid,
    read_config,
    run_sensitivity_study,
    run_study,
    spec_from_mapping,
)

EXIT_OK, EXIT_INPUT, EXIT_ESTIMATION = 0, 2, 3


class _Stage:
    """Names the step in progress so failures can report where they happened."""

    name = "setup"


def _error_text(exc: BaseException) -> str:
    msg = str(exc)
    label = type(exc).__name__
    return msg if msg.startswith(label) else f"{label}: {msg}" if msg else label


def _csv_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _echo(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _envelope(args, payload: dict, started: float) -> dict:
    return {
        "tool": "tcace",
        "version": __version__,
        "command": args.command,
        "seed": getattr(args, "seed", None),
        "config": _echo(args),
        **payload,
        "timing": {"seconds": round(time.perf_counter() - started, 3)},
    }


def _write_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2, default=_json_default) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _json_default(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _load(args, stage: _Stage):
    stage.name = "load"
    schema = {}
    covs = _csv_list(getattr(args, "covariates", None))
    if covs and args.command != "benchmark":
        schema["covariates"] = covs
    ds = load_dataset(args.input, schema)
    stage.name = "validate"
    return ds, validate(ds)


def cmd_estimate(args, stage: _Stage) -> int:
    started = time.perf_counter()
    ds, report = _load(args, stage)
    methods = _csv_list(args.estimators) or ["weighted", "wls", "mr", "itt"]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise InputError(f"unknown estimator(s) {', '.join(bad)}; choose from {', '.join(METHODS)}")
    stage.name = "estimate"
    ests = analyze(ds, methods, args.treatment_prob, args.level, args.bootstrap, args.seed, args.threads)
    payload = {"validation": report.to_dict(), "estimates": [e.to_dict() for e in ests]}
    stage.name = "diagnostics"
    try:
        nz = fit_nuisance(ds, args.treatment_prob)
        payload["proxy_diagnostic"] = proxy_compliance_diagnostic(ds, nz.weights).to_dict()
    except NoProxyData:
        pass
    stage.name = "output"
    _write_json(_envelope(args, payload, started), args.output)
    return EXIT_OK


def _resolve_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    bundled = resources.files("tcace") / "configs" / (name if name.endswith(".cfg") else name + ".cfg")
    if bundled.is_file():
        return Path(str(bundled))
    raise InputError(f"config {name!r} not found (neither a file nor a bundled config)")


_OVERRIDES = {
    "lam": "lam", "trials": "trials", "n_total": "n_total", "seed": "seed", "bootstrap": "bootstrap_b",
    "kappa": "kappa", "dim_v": "dim_v", "r_prime": "r_prime", "noise_sd": "noise_sd", "dim_x": "dim_x",
    "estimators": "estimators", "gamma_grid": "gamma_grid",
}


def cmd_simulate(args, stage: _Stage) -> int:
    started = time.perf_counter()
    stage.name = "config"
    overrides = {key: getattr(args, flag) for flag, key in _OVERRIDES.items() if getattr(args, flag) is not None}
    if args.config:
        specs = read_config(_resolve_config(args.config))
        specs = [spec_from_mapping({**_spec_items(s), **overrides}) for s in specs] if overrides else specs
    elif args.scenario:
        specs = [spec_from_mapping({"kind": args.scenario, **overrides})]
    else:
        raise InputError("simulate needs --config or --scenario")
    stage.name = "simulate"
    out_dir = Path(args.output_dir) if args.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    tables, results = [], []
    for k, spec in enumerate(specs):
        if spec.kind is ScenarioKind.SENSITIVITY:
            study = run_sensitivity_study(spec, threads=args.threads)
            sys.stdout.write(study.to_text())
            results.append({"kind": spec.kind.value, **json.loads(study.to_json())})
            if out_dir:
                (out_dir / f"sensitivity_{k}.csv").write_text(study.to_csv(), encoding="utf-8")
                if args.plots:
                    from .plotting import plot_sensitivity_study

                    plot_sensitivity_study(study, out_dir / f"sensitivity_{k}.svg")
        else:
            table = run_study(spec, threads=args.threads)
            tables.append(table)
            results.append({"kind": spec.kind.value, **json.loads(table.to_json())})
            if out_dir:
                (out_dir / f"study_{k}.csv").write_text(table.to_csv(), encoding="utf-8")
                if args.plots:
                    from .plotting import plot_study_bias

                    plot_study_bias(table, out_dir / f"study_{k}_bias.svg")
    if tables:
        text = format_study_tables(tables)
        sys.stdout.write(text)
        if out_dir:
            (out_dir / "study.txt").write_text(text, encoding="utf-8")
    stage.name = "output"
    env = _envelope(args, {"studies": results}, started)
    if out_dir:
        _write_json(env, str(out_dir / "study.json"))
    elif args.output:
        _write_json(env, args.output)
    return EXIT_OK


def _spec_items(spec) -> dict:
    d = spec.to_dict()
    d["estimators"] = ",".join(d["estimators"])
    d["gamma_grid"] = ",".join(repr(g) for g in d["gamma_grid"])
    return {k: v for k, v in d.items()}


def cmd_sensitivity(args, stage: _Stage) -> int:
    started = time.perf_counter()
    ds, report = _load(args, stage)
    stage.name = "config"
    if args.gamma_grid:
        grid = parse_grid(args.gamma_grid)
    elif args.gamma is not None:
        grid = (args.gamma,)
    else:
        grid = DEFAULT_GRID
    query = SensitivityQuery(gamma=grid[0], grid=grid, bootstrap_b=args.bootstrap, seed=args.seed, level=args.level)
    stage.name = "nuisance"
    nz = fit_nuisance(ds, args.treatment_prob)
    stage.name = "sensitivity"
    rep = sensitivity_report(ds, nz.weights, query, args.treatment_prob, benchmarks=args.benchmarks)
    stage.name = "output"
    if args.csv:
        import csv

        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rep.csv_rows())
    if args.svg:
        from .plotting import plot_sensitivity

        plot_sensitivity(rep.per_gamma, args.svg, rep.point_estimate)
    _write_json(_envelope(args, {"validation": report.to_dict(), "report": rep.to_dict()}, started), args.output)
    return EXIT_OK


def _bar_list(rows: list[dict]) -> str:
    vals = [r["gamma_hat"] for r in rows if r["gamma_hat"] is not None]
    top = max(vals) if vals else 1.0
    width = max((len(r["omitted_covariate"]) for r in rows), default=4)
    lines = []
    for r in rows:
        g = r["gamma_hat"]
        if g is None:
            lines.append(f"{r['omitted_covariate']:>{width}}  failed: {r.get('error', '')}")
            continue
        bar = "#" * max(1, round(40 * (g - 1.0) / (top - 1.0))) if top > 1.0 and g > 1.0 else ""
        lines.append(f"{r['omitted_covariate']:>{width}}  {g:8.4f}  {bar}")
    return "\n".join(lines) + "\n"


def cmd_benchmark(args, stage: _Stage) -> int:
    started = time.perf_counter()
    ds, report = _load(args, stage)
    stage.name = "benchmark"
    rows = benchmark_all(ds, _csv_list(args.covariates))
    stage.name = "output"
    sys.stderr.write(_bar_list(rows))
    if args.svg:
        from .plotting import plot_benchmarks

        plot_benchmarks(rows, args.svg)
    _write_json(_envelope(args, {"benchmarks": rows}, started), args.output)
    return EXIT_OK


def cmd_plot(args, stage: _Stage) -> int:
    stage.name = "load"
    try:
        doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read report {args.report}: {exc}") from None
    rep = doc.get("report", doc)
    if "per_gamma" not in rep:
        raise InputError("report has no per_gamma entries")
    stage.name = "plot"
    from .plotting import plot_sensitivity

    plot_sensitivity(rep["per_gamma"], args.output, rep.get("point_estimate"))
    return EXIT_OK


def _prob(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcace", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tcace {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, covariates_help="comma list of covariate columns (default: headers starting with x)"):
        sp.add_argument("--input", required=True, help="merged CSV with s, z, d, y and covariate columns")
        sp.add_argument("--covariates", help=covariates_help)
        sp.add_argument("--output", help="JSON output path (default: stdout)")
        sp.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("estimate", help="point estimates, standard errors and confidence intervals")
    data_args(e)
    e.add_argument("--estimators", default="weighted,wls,mr,itt", help=f"comma list from {','.join(METHODS)}")
    e.add_argument("--treatment-prob", type=_prob, help="known P(Z=1) in the study; omit to fit a logistic model")
    e.add_argument("--level", type=_prob, default=0.95)
    e.add_argument("--bootstrap", type=int, default=500, help="bootstrap replicates for non-sandwich SEs")
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sensitivity", help="partial identification intervals over gamma")
    data_args(s)
    s.add_argument("--gamma", type=float)
    s.add_argument("--gamma-grid", help="start:stop:step or comma list (default 1:2:0.05)")
    s.add_argument("--bootstrap", type=int, help="percentile bootstrap replicates")
    s.add_argument("--treatment-prob", type=_prob)
    s.add_argument("--level", type=_prob, default=0.95)
    s.add_argument("--benchmarks", action="store_true", help="also report gamma-hat per covariate")
    s.add_argument("--csv", help="write gamma, lo, hi, boot_lo, boot_hi")
    s.add_argument("--svg", help="write the error-bar chart")
    s.set_defaults(func=cmd_sensitivity)

    b = sub.add_parser("benchmark", help="gamma-hat for each omitted covariate")
    data_args(b, "comma list of covariates to omit one at a time (default: all)")
    b.add_argument("--svg", help="write a bar chart")
    b.set_defaults(func=cmd_benchmark)

    m = sub.add_parser("simulate", help="Monte Carlo study from a config file or a named scenario")
    m.add_argument("--config", help="config path or bundled name such as table1_desk")
    m.add_argument("--scenario", help="standard, observational, exclusion, principal or sensitivity")
    m.add_argument("--lambda", dest="lam", type=float)
    m.add_argument("--kappa", type=float)
    m.add_argument("--dim-v", type=int)
    m.add_argument("--dim-x", type=int)
    m.add_argument("--r-prime", type=float)
    m.add_argument("--noise-sd", type=float)
    m.add_argument("--trials", type=int)
    m.add_argument("--n-total", type=int)
    m.add_argument("--bootstrap", type=int)
    m.add_argument("--estimators")
    m.add_argument("--gamma-grid")
    m.add_argument("--seed", type=int)
    m.add_argument("--threads", type=int)
    m.add_argument("--output-dir", help="directory for CSV, text, JSON and figures")
    m.add_argument("--output", help="JSON output path when no --output-dir is given")
    m.add_argument("--plots", action="store_true", help="write SVG figures into --output-dir")
    m.set_defaults(func=cmd_simulate)

    pl = sub.add_parser("plot", help="render a saved sensitivity report as SVG")
    pl.add_argument("--report", required=True)
    pl.add_argument("--output", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = _Stage()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", OverlapViolation)
            return args.func(args, stage)
    except InputError as exc:
        sys.stderr.write(f"tcace {args.command}: {stage.name} failed: {_error_text(exc)}\n")
        return EXIT_INPUT
    except (EstimationError, TCACEError) as exc:
        sys.stderr.write(f"tcace {args.command}: {stage.name} failed: {_error_text(exc)}\n")
        return EXIT_ESTIMATION
    except OSError as exc:
        sys.stderr.write(f"tcace {args.command}: {stage.name} failed: {exc}\n")
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        sys.stderr.write(f"tcace {args.command}: internal error during {stage.name}: {_error_text(exc)}\n")
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
