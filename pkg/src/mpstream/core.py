"""Shared domain vocabulary: links, rates, schedules, simulation configuration.

All types here are immutable after construction and safe to share across
concurrent workers. Link indices are 0-based everywhere inside the library;
conversion to the 1-based indices used in user-facing output happens at the
CLI boundary only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

UNDERLOAD = "underload"
CRITICAL = "critical"
OVERLOAD = "overload"

# |R - 1| below this counts as the critical regime; exact equality is
# unattainable in floating point.
CRITICAL_TOL = 1e-9

_FREQ_SUM_TOL = 1e-12


@dataclass(frozen=True)
class LinkRates:
    """Per-link mean data rates r_k, their sum R, and frequencies f_k = r_k / R.

    The frequencies are the load-balancing targets: an efficient schedule
    sends a fraction f_k of the chunks to link k.
    """

    rates: tuple[float, ...]
    sum_rate: float
    frequencies: tuple[float, ...]

    def __post_init__(self):
        if not self.rates:
            raise ValueError("at least one link is required")
        for k, r in enumerate(self.rates):
            if not math.isfinite(r) or r <= 0.0:
                raise ValueError(f"rates[{k}] must be positive and finite, got {r}")
        if abs(sum(self.frequencies) - 1.0) > _FREQ_SUM_TOL:
            raise ValueError("frequencies do not sum to 1")
        if any(f <= 0.0 for f in self.frequencies):
            raise ValueError("every frequency must be positive")

    @classmethod
    def from_rates(cls, rates) -> "LinkRates":
        """Build from per-link rates r_k; R and f_k are derived."""
        rates = tuple(float(r) for r in rates)
        for k, r in enumerate(rates):
            if not math.isfinite(r) or r <= 0.0:
                raise ValueError(f"rates[{k}] must be positive and finite, got {r}")
        total = math.fsum(rates)
        freqs = tuple(r / total for r in rates)
        return cls(rates=rates, sum_rate=total, frequencies=freqs)

    @property
    def n_links(self) -> int:
        return len(self.rates)

    @property
    def means(self) -> tuple[float, ...]:
        """Per-link mean chunk delays mu_k = 1 / r_k."""
        return tuple(1.0 / r for r in self.rates)


def link_rates_from_means(means) -> LinkRates:
    """Build LinkRates from per-link mean delays mu_k (r_k = 1 / mu_k)."""
    means = tuple(float(m) for m in means)
    for k, m in enumerate(means):
        if not math.isfinite(m) or m <= 0.0:
            raise ValueError(f"means[{k}] must be positive and finite, got {m}")
    return LinkRates.from_rates(1.0 / m for m in means)


def regime(rates: LinkRates) -> str:
    """Classify the sum rate: underload (R > 1), critical (R = 1), overload (R < 1)."""
    r = rates.sum_rate
    if abs(r - 1.0) <= CRITICAL_TOL:
        return CRITICAL
    return UNDERLOAD if r > 1.0 else OVERLOAD


@dataclass(frozen=True)
class ChunkSchedule:
    """A static chunk-to-link assignment (0-based link indices, one per chunk).

    Chunks assigned to the same link are requested in index order, so the
    assignment vector fully determines the per-link request sequences.
    """

    assignment: np.ndarray
    n_links: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=np.int64)
        if a.ndim != 1 or a.size < 1:
            raise ValueError("assignment must be a nonempty 1-d sequence")
        if self.n_links < 1:
            raise ValueError("n_links must be >= 1")
        if a.min() < 0 or a.max() >= self.n_links:
            raise ValueError("assignment entries must lie in [0, n_links)")
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    @property
    def n_chunks(self) -> int:
        return int(self.assignment.size)

    def link_positions(self, k: int) -> np.ndarray:
        """0-based chunk indices assigned to link k, in request order."""
        return np.flatnonzero(self.assignment == k)

    def running_counts(self) -> np.ndarray:
        """(n_links, n_chunks) array with d_k(n) at column n-1."""
        onehot = self.assignment[None, :] == np.arange(self.n_links)[:, None]
        return np.cumsum(onehot, axis=1)

    @property
    def final_counts(self) -> np.ndarray:
        """d_k(N) for every link; sums to N."""
        return np.bincount(self.assignment, minlength=self.n_links)


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo run configuration: file length N, pre-buffer B, replications, seed."""

    n_chunks: int
    prebuffer: float = 0.0
    runs: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")
        if not (self.prebuffer >= 0.0):
            raise ValueError("prebuffer must be >= 0")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")


@dataclass(frozen=True)
class StarvationEstimate:
    """Monte Carlo starvation-probability point estimate with binomial stderr."""

    p_hat: float
    runs: int
    stderr: float = field(default=-1.0)

    def __post_init__(self):
        if not 0.0 <= self.p_hat <= 1.0:
            raise ValueError("p_hat must lie in [0, 1]")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.stderr < 0.0:
            se = math.sqrt(self.p_hat * (1.0 - self.p_hat) / self.runs)
            object.__setattr__(self, "stderr", se)

    @classmethod
    def from_count(cls, starved: int, runs: int) -> "StarvationEstimate":
        return cls(p_hat=starved / runs, runs=runs)
