"""Starvation-probability estimation by independent-replication Monte Carlo.

The central quantity is the per-replication *margin*: the largest amount by
which any chunk's arrival time exceeds its playback index. A replication
starves at pre-buffer B exactly when its margin exceeds B, so one pass of
delay draws prices an entire B-grid with perfectly coupled randomness (the
starvation indicator is then nonincreasing in B by construction).

Replications are processed in fixed-size batches; the random stream of batch
j is derived from (master seed, j), so results are bit-identical regardless
of the worker count. Batches are embarrassingly parallel and merged by
concatenation.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import ChunkSchedule, SimConfig, StarvationEstimate
from .delays import (
    DelayModel,
    MarkovChainSpec,
    MarkovLink,
    moments,
    sample_chunk_delay_matrix,
    sample_chunk_delays,
)

BATCH_SIZE = 1024

WORKERS_ENV = "MPSTREAM_WORKERS"


def resolve_workers(workers: int | None = None) -> int:
    """Explicit argument, else the MPSTREAM_WORKERS variable, else 1."""
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def _batch_rng(seed: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, batch_index)))


def _batch_sizes(runs: int) -> list[int]:
    full, rest = divmod(runs, BATCH_SIZE)
    return [BATCH_SIZE] * full + ([rest] if rest else [])


def _run_batches(task, runs: int, seed: int, workers: int | None) -> np.ndarray:
    """Evaluate `task(batch_index, batch_size)` over all batches and concatenate."""
    sizes = _batch_sizes(runs)
    jobs = list(enumerate(sizes))
    workers = resolve_workers(workers)
    if workers == 1 or len(jobs) == 1:
        parts = [task(j, n) for j, n in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_call_task, [(task, j, n) for j, n in jobs]))
    return np.concatenate(parts)


def _call_task(packed):
    task, j, n = packed
    return task(j, n)


@dataclass(frozen=True)
class SimOutcome:
    """One simulated playback: did it starve, and at which chunk first."""

    starved: bool
    first_starved_chunk: int | None = None

    def __post_init__(self):
        if self.starved != (self.first_starved_chunk is not None):
            raise ValueError("first_starved_chunk must be present iff starved")


# ---------------------------------------------------------------------------
# Schedule-driven starvation
# ---------------------------------------------------------------------------

def _deadline_arrays(schedule: ChunkSchedule) -> list[np.ndarray]:
    """Per link: playback index (1-based chunk number) of its successive chunks."""
    return [
        (schedule.link_positions(k) + 1).astype(float)
        for k in range(schedule.n_links)
    ]


@dataclass(frozen=True)
class _MarginTask:
    models: tuple
    deadlines: tuple
    seed: int

    def __call__(self, batch_index: int, batch_size: int) -> np.ndarray:
        rng = _batch_rng(self.seed, batch_index)
        margins = np.full(batch_size, -np.inf)
        for model, deadline in zip(self.models, self.deadlines):
            if deadline.size == 0:
                continue
            delays = sample_chunk_delay_matrix(model, deadline.size, batch_size, rng)
            arrivals = np.cumsum(delays, axis=1)
            np.maximum(margins, (arrivals - deadline).max(axis=1), out=margins)
        return margins


def starvation_margins(
    schedule: ChunkSchedule,
    models,
    config: SimConfig,
    workers: int | None = None,
) -> np.ndarray:
    """Per-replication max over chunks of (arrival time - playback index).

    The replication starves at pre-buffer B iff its margin exceeds B, so this
    array prices every B at once with shared draws.
    """
    if schedule.n_links != len(models):
        raise ValueError("one delay model per link is required")
    if schedule.n_chunks != config.n_chunks:
        raise ValueError("schedule length must equal config.n_chunks")
    task = _MarginTask(
        models=tuple(models),
        deadlines=tuple(_deadline_arrays(schedule)),
        seed=config.seed,
    )
    return _run_batches(task, config.runs, config.seed, workers)


def estimate_starvation(
    schedule: ChunkSchedule,
    models,
    config: SimConfig,
    workers: int | None = None,
) -> StarvationEstimate:
    """Monte Carlo starvation probability at pre-buffer config.prebuffer."""
    margins = starvation_margins(schedule, models, config, workers)
    return StarvationEstimate.from_count(int((margins > config.prebuffer).sum()), config.runs)


def starvation_curve(
    schedule: ChunkSchedule,
    models,
    config: SimConfig,
    prebuffers,
    workers: int | None = None,
) -> list[StarvationEstimate]:
    """Estimates over a pre-buffer grid using one shared set of delay draws.

    Sharing draws makes the estimated curve exactly nonincreasing in B.
    """
    margins = starvation_margins(schedule, models, config, workers)
    return [
        StarvationEstimate.from_count(int((margins > float(b)).sum()), config.runs)
        for b in prebuffers
    ]


def simulate_once(
    schedule: ChunkSchedule,
    models,
    prebuffer: float,
    rng: np.random.Generator,
) -> SimOutcome:
    """Simulate a single playback and report the first starved chunk, if any."""
    first = None
    for k in range(schedule.n_links):
        positions = schedule.link_positions(k)
        if positions.size == 0:
            continue
        arrivals = np.cumsum(sample_chunk_delays(models[k], positions.size, rng))
        late = arrivals > positions + 1 + prebuffer
        if late.any():
            chunk = int(positions[int(np.argmax(late))]) + 1
            first = chunk if first is None else min(first, chunk)
    if first is None:
        return SimOutcome(starved=False)
    return SimOutcome(starved=True, first_starved_chunk=first)


# ---------------------------------------------------------------------------
# Oracle (policy-free) lower bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _OracleTask:
    models: tuple
    n_chunks: int
    horizon: float
    seed: int

    def __call__(self, batch_index: int, batch_size: int) -> np.ndarray:
        rng = _batch_rng(self.seed, batch_index)
        n = self.n_chunks
        idx = np.arange(1, n + 1, dtype=float)
        margins = np.empty(batch_size)
        counts = [_arrival_count_hint(m, self.horizon) for m in self.models]
        for i in range(batch_size):
            pools = []
            for model, count in zip(self.models, counts):
                arrivals = _arrivals_until(model, self.horizon, count, rng)
                pools.append(arrivals)
            pooled = np.sort(np.concatenate(pools)) if pools else np.empty(0)
            if pooled.size < n:
                margins[i] = np.inf
            else:
                margins[i] = (pooled[:n] - idx).max()
        return margins


def _arrival_count_hint(model: DelayModel, horizon: float) -> int:
    mean = moments(model)[0]
    expect = horizon / mean
    return int(expect + 10.0 * math.sqrt(expect + 1.0) + 50.0)


def _arrivals_until(model, horizon, count, rng) -> np.ndarray:
    """Cumulative arrival times up to the horizon (one trajectory per call)."""
    for _ in range(60):
        arrivals = np.cumsum(sample_chunk_delays(model, count, rng))
        if arrivals[-1] > horizon:
            return arrivals[arrivals <= horizon]
        # undershoot: resample the whole trajectory with a larger draw
        count *= 2
    raise RuntimeError("arrival horizon not reached; delays may be degenerate")


def oracle_margins(
    models,
    config: SimConfig,
    horizon_prebuffer: float | None = None,
    workers: int | None = None,
) -> np.ndarray:
    """Per-replication margin max_n (A_(n) - n) over pooled link arrivals.

    A_(n) is the n-th smallest arrival time across all links when every link
    runs flat out; the policy-free starvation bound at pre-buffer B is the
    probability that this margin exceeds B. Valid for B up to
    horizon_prebuffer (default config.prebuffer).
    """
    if horizon_prebuffer is None:
        horizon_prebuffer = config.prebuffer
    task = _OracleTask(
        models=tuple(models),
        n_chunks=config.n_chunks,
        horizon=float(horizon_prebuffer) + config.n_chunks,
        seed=config.seed,
    )
    return _run_batches(task, config.runs, config.seed, workers)


def estimate_oracle_lower_bound(
    models,
    config: SimConfig,
    workers: int | None = None,
) -> StarvationEstimate:
    """Monte Carlo estimate of the starvation lower bound valid for any policy."""
    margins = oracle_margins(models, config, workers=workers)
    return StarvationEstimate.from_count(int((margins > config.prebuffer).sum()), config.runs)


def oracle_lower_bound_curve(
    models,
    config: SimConfig,
    prebuffers,
    workers: int | None = None,
) -> list[StarvationEstimate]:
    """Oracle lower bound over a pre-buffer grid with shared draws."""
    grid = [float(b) for b in prebuffers]
    margins = oracle_margins(models, config, horizon_prebuffer=max(grid), workers=workers)
    return [
        StarvationEstimate.from_count(int((margins > b).sum()), config.runs)
        for b in grid
    ]


# ---------------------------------------------------------------------------
# Accelerated Markov links
# ---------------------------------------------------------------------------

def estimate_accelerated_markov(
    schedule: ChunkSchedule,
    specs,
    speed: float,
    config: SimConfig,
    workers: int | None = None,
) -> StarvationEstimate:
    """Starvation estimate with every link's chain sped up by the given factor."""
    models = [MarkovLink(spec=spec, speed=speed) for spec in specs]
    return estimate_starvation(schedule, models, config, workers)
