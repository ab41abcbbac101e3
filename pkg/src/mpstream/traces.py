"""Real-world delay traces: ingestion, autocorrelation diagnostics, and the
bootstrap / Gaussian-surrogate / analytic starvation comparison.

A trace is a sequence of observed per-chunk delays for one link. The
bootstrap treats them as i.i.d. (adequate when the measured autocorrelation
is weak) and resamples with replacement; the surrogate path fits a normal
distribution to the same trace and re-runs both the simulation and the
closed-form bound with the fitted parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import LinkRates, SimConfig, StarvationEstimate
from .delays import EmpiricalTrace, Gaussian
from .bounds import exponent_subgaussian, iid_subgaussian_bound, _combine
from .montecarlo import starvation_curve
from .policy import build_upper_balanced


@dataclass(frozen=True)
class Trace:
    """Observed per-chunk delays (positive, finite) with a source label."""

    delays: np.ndarray
    source: str = ""

    def __post_init__(self):
        d = np.asarray(self.delays, dtype=float)
        if d.ndim != 1 or d.size == 0:
            raise ValueError("trace must be a nonempty 1-d sequence")
        if np.any(~np.isfinite(d)) or np.any(d <= 0):
            raise ValueError("trace delays must be positive and finite")
        d.setflags(write=False)
        object.__setattr__(self, "delays", d)

    @property
    def mean(self) -> float:
        return float(self.delays.mean())

    @property
    def variance(self) -> float:
        return float(self.delays.var())


def load_trace(path) -> Trace:
    """Read one delay per line (plain decimal or single-column CSV).

    A non-numeric first row is treated as a header and skipped. Non-positive
    or unparseable values are rejected with their line number.
    """
    path = Path(path)
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip().rstrip(",")
            if not text or text.startswith("#"):
                continue
            try:
                x = float(text)
            except ValueError:
                if not values and lineno == 1:
                    continue  # header row
                raise ValueError(f"{path}:{lineno}: cannot parse {text!r} as a delay")
            if not np.isfinite(x) or x <= 0:
                raise ValueError(f"{path}:{lineno}: delay must be positive, got {text}")
            values.append(x)
    if not values:
        raise ValueError(f"{path}: no delay values found")
    return Trace(delays=np.array(values), source=str(path))


def autocorrelation(trace: Trace, max_lag: int) -> np.ndarray:
    """|rho(L)| for L = 0..max_lag; lag 0 is exactly 1.

    rho(L) is the lag-L sample autocovariance (divisor n - L) normalized by
    the sample variance.
    """
    x = trace.delays
    n = x.size
    if max_lag < 0:
        raise ValueError("max_lag must be >= 0")
    if n <= max_lag + 1:
        raise ValueError("trace is too short for the requested lag")
    centered = x - x.mean()
    var = float(np.dot(centered, centered)) / n
    if var == 0.0:
        raise ValueError("trace has zero variance")
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for lag in range(1, max_lag + 1):
        cov = float(np.dot(centered[:-lag], centered[lag:])) / (n - lag)
        out[lag] = abs(cov / var)
    return out


def empirical_link_rates(traces) -> LinkRates:
    """LinkRates with r_k = 1 / (trace k's mean delay)."""
    return LinkRates.from_rates(1.0 / t.mean for t in traces)


def trace_starvation_curve(
    traces,
    n_chunks: int,
    b_grid,
    runs: int,
    seed: int,
    workers: int | None = None,
) -> list[StarvationEstimate]:
    """Bootstrap starvation estimates over the margin grid b (pre-buffer b + K - 1).

    Delays are resampled i.i.d. with replacement from each link's empirical
    distribution; the schedule is the upper-balanced one built from the
    empirical rates.
    """
    rates = empirical_link_rates(traces)
    schedule = build_upper_balanced(rates, n_chunks)
    models = [EmpiricalTrace(samples=tuple(t.delays)) for t in traces]
    config = SimConfig(n_chunks=n_chunks, runs=runs, seed=seed)
    prebuffers = [float(b) + rates.n_links - 1 for b in b_grid]
    return starvation_curve(schedule, models, config, prebuffers, workers)


def gaussian_surrogate_curves(
    traces,
    n_chunks: int,
    b_grid,
    runs: int,
    seed: int,
    variant: str = "product",
    workers: int | None = None,
) -> tuple[list[StarvationEstimate], list[float]]:
    """('Gaussian', 'Analytic') curves from normal fits to each trace.

    The Gaussian curve simulates positive-normal delays with each trace's
    fitted mean and variance; the Analytic curve evaluates the closed-form
    exponent bound exp(-a_k* b) with the exact Gaussian root
    a_k* = 2 mu_k (R - 1) / sigma_k^2 when the fitted rates are underloaded,
    and falls back to the sub-Gaussian critical form otherwise.
    """
    fits = [(t.mean, t.variance) for t in traces]
    for i, (_, var) in enumerate(fits):
        if var <= 0:
            raise ValueError(f"trace {i} has zero variance; cannot fit a surrogate")
    rates = LinkRates.from_rates(1.0 / mu for mu, _ in fits)
    schedule = build_upper_balanced(rates, n_chunks)
    models = [Gaussian(mean=mu, variance=var) for mu, var in fits]
    config = SimConfig(n_chunks=n_chunks, runs=runs, seed=seed)
    prebuffers = [float(b) + rates.n_links - 1 for b in b_grid]
    gaussian = starvation_curve(schedule, models, config, prebuffers, workers)

    analytic = []
    underload = rates.sum_rate > 1.0
    for b in b_grid:
        b = float(b)
        if underload:
            exps = [
                exponent_subgaussian(mu, var, rates.sum_rate) for mu, var in fits
            ]
            analytic.append(_combine([np.exp(-a * b) for a in exps], variant))
        else:
            analytic.append(
                iid_subgaussian_bound(rates, [var for _, var in fits], n_chunks, b, variant)
            )
    return gaussian, analytic
