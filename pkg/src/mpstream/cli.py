"""Experiment runner: parse a flat key/value config, run one experiment kind,
and emit a deterministic CSV (plus an optional rendered figure).

Subcommands: simulate, bound, prebuffer, policy, variance, trace.
Common flags: --config PATH, --seed U64, --runs N, --workers N, --out PATH,
--dry-run, --plot [PATH]. Positional key=value pairs override config entries.
The MPSTREAM_WORKERS environment variable supplies the worker count when
--workers is absent.

CSV dialect: comma-separated, '.' decimal, LF line endings, '#'-prefixed
metadata lines (tool version; seed, runs and config digest).
"""

from __future__ import annotations

import argparse
import hashlib
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    CRITICAL,
    LinkRates,
    SimConfig,
    UNDERLOAD,
    regime,
)
from .delays import (
    Csma,
    EmpiricalTrace,
    Exponential,
    Gaussian,
    MarkovLink,
    Scheduler,
    integrated_rate,
    link_rates_for_models,
    mm1_chain,
    moments,
    onoff_chain,
)
from .bounds import (
    diffusion_bound_physical,
    iid_subgaussian_bound,
    iid_upper_bound,
    poisson_solve,
)
from .montecarlo import (
    estimate_oracle_lower_bound,
    estimate_starvation,
    oracle_lower_bound_curve,
    starvation_curve,
)
from .policy import build_upper_balanced, max_balance_slack
from .prebuffer import select_prebuffer
from .traces import (
    autocorrelation,
    gaussian_surrogate_curves,
    load_trace,
    trace_starvation_curve,
)

KINDS = ("simulate", "bound", "prebuffer", "policy", "variance", "trace")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config handling
# ---------------------------------------------------------------------------

def load_config(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; later keys win."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _merged_config(args, overrides) -> dict[str, str]:
    cfg = load_config(args.config) if args.config else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    for flag in ("seed", "runs", "workers", "n_chunks"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg[flag] = str(value)
    return cfg


def config_digest(cfg: dict[str, str]) -> str:
    text = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _get(cfg, key, cast, default=None, required=False):
    if key not in cfg:
        if required:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return cast(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_grid(text: str) -> list[float]:
    parts = [p for chunk in text.split(",") for p in chunk.split()]
    if not parts:
        raise ValueError("grid is empty")
    grid = [float(p) for p in parts]
    if any(b > a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid must be sorted ascending")
    return grid


def _parse_kv_fields(parts: list[str], spec_name: str) -> dict[str, str]:
    fields = {}
    for part in parts:
        if "=" not in part:
            raise ConfigError(f"{spec_name}: expected field=value, got {part!r}")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def parse_model_spec(text: str):
    """One link's delay model, e.g. 'exponential rate=0.55' or
    'onoff alpha=1 beta=1 on_rate=1.05 speed=1'."""
    parts = text.split()
    if not parts:
        raise ConfigError("empty model spec")
    name, fields = parts[0].lower(), _parse_kv_fields(parts[1:], parts[0])

    def need(key, cast=float):
        if key not in fields:
            raise ConfigError(f"model {name!r} needs field {key!r}")
        return cast(fields.pop(key))

    def opt(key, default, cast=float):
        return cast(fields.pop(key)) if key in fields else default

    try:
        if name == "exponential":
            model = Exponential(rate=need("rate"))
        elif name == "gaussian":
            model = Gaussian(mean=need("mean"), variance=need("var"))
        elif name == "csma":
            model = Csma(
                success=need("p"),
                window=need("window"),
                slot=need("slot"),
                frames_per_chunk=need("frames", int),
            )
        elif name == "scheduler":
            model = Scheduler(
                success=need("p"),
                slot=need("slot"),
                frames_per_chunk=need("frames", int),
            )
        elif name == "onoff":
            spec = onoff_chain(need("alpha"), need("beta"), opt("on_rate", 1.0))
            model = MarkovLink(spec=spec, speed=opt("speed", 1.0))
        elif name == "mm1":
            spec = mm1_chain(need("lam"), need("mu"), n_states=int(opt("states", 200)))
            model = MarkovLink(spec=spec, speed=opt("speed", 1.0))
        elif name == "trace":
            if "path" not in fields:
                raise ConfigError("model 'trace' needs field 'path'")
            model = EmpiricalTrace(samples=tuple(load_trace(fields.pop("path")).delays))
        else:
            raise ConfigError(f"unknown model kind {name!r}")
    except ValueError as exc:
        raise ConfigError(f"model {name!r}: {exc}") from exc
    if fields:
        raise ConfigError(f"model {name!r}: unknown fields {sorted(fields)}")
    return model


def _link_models(cfg) -> list:
    models = []
    k = 1
    while f"link{k}" in cfg:
        models.append(parse_model_spec(cfg[f"link{k}"]))
        k += 1
    if not models:
        raise ConfigError("no links configured (expected link1, link2, ...)")
    return models


def _margin_to_prebuffer(b: float, rates: LinkRates, n_chunks: int) -> float:
    """Total pre-buffer covered by the bounds at margin b, by regime."""
    slack = b + rates.n_links - 1
    if regime(rates) == UNDERLOAD:
        return slack
    return (1.0 / rates.sum_rate - 1.0) * n_chunks + slack


# ---------------------------------------------------------------------------
# Experiment runners: each returns (header, rows, metadata_extras)
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating, np.integer)):
        return repr(float(value)) if isinstance(value, np.floating) else str(int(value))
    return str(value)


def _run_simulate(cfg, workers):
    models = _link_models(cfg)
    rates = link_rates_for_models(models)
    n_chunks = _get(cfg, "n_chunks", int, 3600)
    runs = _get(cfg, "runs", int, 100_000)
    seed = _get(cfg, "seed", int, 0)
    estimator = _get(cfg, "estimator", str, "schedule")
    if estimator not in ("schedule", "oracle"):
        raise ConfigError("estimator must be 'schedule' or 'oracle'")
    if "prebuffer_grid" in cfg:
        prebuffers = _parse_grid(cfg["prebuffer_grid"])
        margins = [b - (rates.n_links - 1) for b in prebuffers]
    else:
        margins = _parse_grid(_get(cfg, "b_grid", str, required=True))
        prebuffers = [_margin_to_prebuffer(b, rates, n_chunks) for b in margins]
    config = SimConfig(n_chunks=n_chunks, runs=runs, seed=seed)
    if estimator == "oracle":
        ests = oracle_lower_bound_curve(models, config, prebuffers, workers)
    else:
        schedule = build_upper_balanced(rates, n_chunks)
        ests = starvation_curve(schedule, models, config, prebuffers, workers)
    header = ["b", "prebuffer", "p_hat", "stderr", "runs"]
    rows = [
        [b, bb, e.p_hat, e.stderr, e.runs]
        for b, bb, e in zip(margins, prebuffers, ests)
    ]
    return header, rows, {"estimator": estimator}


def _run_bound(cfg, workers):
    models = _link_models(cfg)
    rates = link_rates_for_models(models)
    n_chunks = _get(cfg, "n_chunks", int, 3600)
    variant = _get(cfg, "variant", str, "product")
    family = _get(cfg, "family", str, "iid")
    optimize = _get(cfg, "optimize", _parse_bool, False)
    margins = _parse_grid(_get(cfg, "b_grid", str, required=True))
    header = ["b", "prebuffer", "bound", "variant", "theorem_tag"]
    rows = []
    if family == "iid":
        tag = "iid-optimized" if optimize else "iid-exponent"
        for b in margins:
            val = iid_upper_bound(rates, models, n_chunks, b, variant, optimize)
            rows.append([b, _margin_to_prebuffer(b, rates, n_chunks), val, variant, tag])
    elif family == "subgaussian":
        proxies = _proxies(cfg, models)
        for b in margins:
            val = iid_subgaussian_bound(rates, proxies, n_chunks, b, variant)
            rows.append([b, _margin_to_prebuffer(b, rates, n_chunks), val, variant, "subgaussian"])
    elif family == "diffusion":
        asym_vars = _asym_vars(models)
        for b in margins:
            val = diffusion_bound_physical(rates, asym_vars, n_chunks, b, variant)
            rows.append(
                [b, b + rates.n_links - 1, val, variant, "diffusion-physical"]
            )
    else:
        raise ConfigError("family must be one of iid, subgaussian, diffusion")
    return header, rows, {"family": family}


def _proxies(cfg, models) -> list[float]:
    proxies = []
    for k, model in enumerate(models, start=1):
        key = f"proxy{k}"
        if key in cfg:
            proxies.append(float(cfg[key]))
        elif isinstance(model, Gaussian):
            proxies.append(model.variance)
        else:
            raise ConfigError(f"link {k} needs an explicit sub-Gaussian proxy ({key} = ...)")
    return proxies


def _asym_vars(models) -> list[float]:
    out = []
    for k, model in enumerate(models, start=1):
        if not isinstance(model, MarkovLink):
            raise ConfigError(f"diffusion bounds need Markov links; link {k} is not one")
        out.append(poisson_solve(model.spec).asym_var)
    return out


def _run_prebuffer(cfg, workers):
    models = _link_models(cfg)
    rates = link_rates_for_models(models)
    n_chunks = _get(cfg, "n_chunks", int, 3600)
    target = _get(cfg, "target", float, required=True)
    variant = _get(cfg, "variant", str, "product")
    optimize = _get(cfg, "optimize", _parse_bool, False)
    proxies = None
    if any(f"proxy{k}" in cfg for k in range(1, len(models) + 1)):
        proxies = _proxies(cfg, models)
    result = select_prebuffer(
        rates, n_chunks, target, models=models, proxies=proxies,
        variant=variant, optimize=optimize,
    )
    header = [
        "b_margin", "total_prebuffer", "achieved_bound", "target",
        "variant", "regime", "closed_form_b",
    ]
    rows = [[
        result.b_margin, result.total_prebuffer, result.achieved_bound,
        target, variant, regime(rates),
        "" if result.closed_form_b is None else result.closed_form_b,
    ]]
    return header, rows, {}


def _run_policy(cfg, workers):
    if "rates" in cfg:
        rates = LinkRates.from_rates(_parse_grid(cfg["rates"]))
    else:
        rates = link_rates_for_models(_link_models(cfg))
    n_chunks = _get(cfg, "n_chunks", int, 3600)
    prefix = min(_get(cfg, "prefix", int, 24), n_chunks)
    schedule = build_upper_balanced(rates, n_chunks)
    slack = max_balance_slack(schedule, rates)
    header = ["n", "link"]
    rows = [[n + 1, int(schedule.assignment[n]) + 1] for n in range(prefix)]
    counts = ",".join(str(int(c)) for c in schedule.final_counts)
    return header, rows, {"max_balance_slack": repr(slack), "final_counts": counts}


def _parse_chain(cfg):
    text = _get(cfg, "chain", str, required=True)
    parts = text.split()
    name, fields = parts[0].lower(), _parse_kv_fields(parts[1:], parts[0])
    try:
        if name == "onoff":
            return onoff_chain(
                float(fields.pop("alpha")),
                float(fields.pop("beta")),
                float(fields.pop("on_rate", 1.0)),
            )
        if name == "mm1":
            return mm1_chain(
                float(fields.pop("lam")),
                float(fields.pop("mu")),
                n_states=int(fields.pop("states", 200)),
            )
    except KeyError as exc:
        raise ConfigError(f"chain {name!r} is missing field {exc}") from exc
    raise ConfigError(f"unknown chain kind {name!r} (expected onoff or mm1)")


def _run_variance(cfg, workers):
    spec = _parse_chain(cfg)
    solution = poisson_solve(spec)
    if "phi_grid" not in cfg:
        header = ["sigma2_analytic", "mean_rate"]
        rows = [[solution.asym_var, solution.mean_rate]]
        return header, rows, {}
    phis = _parse_grid(cfg["phi_grid"])
    n_traj = _get(cfg, "n_traj", int, 10_000)
    t_end = _get(cfg, "t_end", float, 1.0)
    seed = _get(cfg, "seed", int, 0)
    header = ["phi", "sim_var", "sigma2_analytic", "ratio"]
    rows = []
    for i, phi in enumerate(phis):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        data = integrated_rate(spec, phi, t_end, n_traj, rng)
        scaled = math.sqrt(phi / t_end) * (data - solution.mean_rate * t_end)
        sim_var = float(np.var(scaled, ddof=1))
        rows.append([phi, sim_var, solution.asym_var, sim_var / solution.asym_var])
    return header, rows, {"n_traj": str(n_traj)}


def _run_trace(cfg, workers):
    traces = []
    k = 1
    while f"trace{k}" in cfg:
        traces.append(load_trace(cfg[f"trace{k}"]))
        k += 1
    if not traces:
        raise ConfigError("no traces configured (expected trace1, trace2, ...)")
    n_chunks = _get(cfg, "n_chunks", int, 3600)
    runs = _get(cfg, "runs", int, 10_000)
    seed = _get(cfg, "seed", int, 0)
    max_lag = _get(cfg, "max_lag", int, 7)
    margins = _parse_grid(_get(cfg, "b_grid", str, required=True))
    boot = trace_starvation_curve(traces, n_chunks, margins, runs, seed, workers)
    gauss, analytic = gaussian_surrogate_curves(
        traces, n_chunks, margins, runs, seed + 1, workers=workers
    )
    header = [
        "b", "trace_p", "trace_stderr", "gaussian_p", "gaussian_stderr", "analytic_bound",
    ]
    rows = [
        [b, t.p_hat, t.stderr, g.p_hat, g.stderr, a]
        for b, t, g, a in zip(margins, boot, gauss, analytic)
    ]
    autocorr_rows = []
    for idx, trace in enumerate(traces, start=1):
        rho = autocorrelation(trace, max_lag)
        autocorr_rows.append([f"link{idx}"] + [float(v) for v in rho])
    autocorr_header = ["link"] + [f"lag{i}" for i in range(max_lag + 1)]
    extras = {"autocorr_header": autocorr_header, "autocorr_rows": autocorr_rows}
    return header, rows, extras


_RUNNERS = {
    "simulate": _run_simulate,
    "bound": _run_bound,
    "prebuffer": _run_prebuffer,
    "policy": _run_policy,
    "variance": _run_variance,
    "trace": _run_trace,
}


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

def _csv_lines(kind, cfg, header, rows, extras) -> list[str]:
    lines = [f"# mpstream {__version__}"]
    seed = cfg.get("seed", "0")
    runs = cfg.get("runs", "")
    meta = f"# kind={kind} seed={seed}"
    if runs:
        meta += f" runs={runs}"
    meta += f" config={config_digest(cfg)}"
    for key, value in extras.items():
        if key.startswith("autocorr"):
            continue
        meta += f" {key}={value}"
    lines.append(meta)
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return lines


def _write_lines(lines: list[str], out: str | None):
    text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8", newline="\n")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mpstream",
        description="Multipath chunk-streaming starvation experiments",
    )
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind, help=f"run a {kind} experiment")
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--runs", type=int, help="Monte Carlo replication override")
        p.add_argument("--workers", type=int, default=None, help="worker process cap")
        p.add_argument("--n-chunks", dest="n_chunks", type=int, help="file length override")
        p.add_argument("--out", help="CSV output path (stdout when omitted)")
        p.add_argument("--plot", nargs="?", const="", default=None,
                       help="also render a figure (optional path; default alongside --out)")
        p.add_argument("--dry-run", action="store_true", help="validate config and exit")
        p.add_argument("overrides", nargs="*", help="key=value config overrides")

    args = parser.parse_args(argv)
    try:
        cfg = _merged_config(args, args.overrides)
        if "kind" in cfg and cfg["kind"] != args.kind:
            raise ConfigError(f"config kind {cfg['kind']!r} conflicts with subcommand {args.kind!r}")
        if args.plot is not None:
            from .report import PLOTTABLE

            if args.kind not in PLOTTABLE:
                raise ConfigError(f"--plot is not available for {args.kind!r}")
            if args.plot == "" and not args.out:
                raise ConfigError("--plot without a path requires --out")
        if args.dry_run:
            _validate_only(args.kind, cfg)
            print(f"ok: {args.kind} config valid")
            return 0
        header, rows, extras = _RUNNERS[args.kind](cfg, args.workers)
        _write_lines(_csv_lines(args.kind, cfg, header, rows, extras), args.out)
        if args.kind == "trace" and "autocorr_rows" in extras and args.out:
            side = str(Path(args.out).with_suffix("")) + "_autocorr.csv"
            lines = _csv_lines("trace", cfg, extras["autocorr_header"], extras["autocorr_rows"], {})
            _write_lines(lines, side)
        if args.plot is not None:
            from .report import render_figure

            fig_path = args.plot or str(Path(args.out).with_suffix(".png"))
            render_figure(args.kind, header, rows, fig_path, title=args.kind)
        return 0
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {message}", file=sys.stderr)
        return 2


def _validate_only(kind: str, cfg: dict[str, str]):
    """Config validation shared with the real run but without any computation."""
    if kind in ("simulate", "bound", "prebuffer"):
        models = _link_models(cfg)
        link_rates_for_models(models)
        if kind == "simulate":
            if "b_grid" not in cfg and "prebuffer_grid" not in cfg:
                raise ConfigError("missing required config key 'b_grid'")
            _parse_grid(cfg.get("b_grid") or cfg["prebuffer_grid"])
        if kind == "bound":
            _parse_grid(_get(cfg, "b_grid", str, required=True))
        if kind == "prebuffer":
            _get(cfg, "target", float, required=True)
    elif kind == "policy":
        if "rates" in cfg:
            LinkRates.from_rates(_parse_grid(cfg["rates"]))
        else:
            _link_models(cfg)
    elif kind == "variance":
        _parse_chain(cfg)
    elif kind == "trace":
        if "trace1" not in cfg:
            raise ConfigError("no traces configured (expected trace1, trace2, ...)")
        _parse_grid(_get(cfg, "b_grid", str, required=True))


if __name__ == "__main__":
    sys.exit(main())
