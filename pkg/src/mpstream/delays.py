"""Per-link chunk-delay models: random samplers plus analytic descriptors.

Every model doubles as a Monte Carlo generator (`sample_chunk_delays`) and,
where a closed form exists, an analytic object exposing mean/variance
(`moments`) and the cumulant generating function (`cgf`). Samplers are pure
functions of (model, random stream), so parallel workers stay independent by
using independent streams.

Supported models:

* ``Exponential`` -- i.i.d. exponential delays with the given rate.
* ``Gaussian`` -- i.i.d. normal delays, sampled conditionally on being
  positive; the analytic descriptors use the untruncated normal (bias is
  negligible for mean/std >= 3).
* ``Csma`` -- random-access link: each chunk is n_f frames, each frame costs
  one slot plus a uniform backoff per failed attempt (geometric failures).
* ``Scheduler`` -- opportunistic scheduling with many competing flows: each
  frame costs a geometric number of slots.
* ``MarkovLink`` -- the link state follows a finite CTMC and data accrues at
  a state-dependent rate; chunk delays are the unit-threshold crossing
  increments of the integrated rate.
* ``EmpiricalTrace`` -- resampling (with replacement) from observed delays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .core import LinkRates

_STATIONARY_TOL = 1e-10


class NoAnalyticCgf(ValueError):
    """Raised when a model has no closed-form cumulant generating function."""


# ---------------------------------------------------------------------------
# Finite-state CTMC description (used by MarkovLink and the variance solver)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarkovChainSpec:
    """Finite irreducible CTMC with a per-state data rate.

    ``rate_matrix`` is the generator Q (rows sum to zero, off-diagonals
    nonnegative); ``rate_fn`` holds r(i) >= 0 per state. The stationary law m
    is computed at construction by a dense solve of m Q = 0, sum(m) = 1.
    """

    n_states: int
    rate_matrix: np.ndarray
    rate_fn: np.ndarray
    stationary: np.ndarray = None

    def __post_init__(self):
        q = np.array(self.rate_matrix, dtype=float)
        r = np.array(self.rate_fn, dtype=float)
        n = self.n_states
        if q.shape != (n, n):
            raise ValueError(f"rate matrix must be {n}x{n}")
        if r.shape != (n,):
            raise ValueError(f"rate function must have {n} entries")
        if np.any(r < 0) or not np.all(np.isfinite(r)):
            raise ValueError("per-state rates must be finite and >= 0")
        off = q.copy()
        np.fill_diagonal(off, 0.0)
        if np.any(off < 0):
            raise ValueError("off-diagonal generator entries must be >= 0")
        if np.max(np.abs(q.sum(axis=1))) > 1e-9 * max(1.0, np.max(np.abs(q))):
            raise ValueError("generator rows must sum to zero")
        if n > 1 and not _strongly_connected(off > 0):
            raise ValueError("chain is not irreducible")
        m = _stationary_law(q)
        if np.max(np.abs(m @ q)) > _STATIONARY_TOL or abs(m.sum() - 1.0) > _STATIONARY_TOL:
            raise ValueError("stationary solve failed its residual check")
        if float(m @ r) <= 0.0:
            raise ValueError("mean data rate must be positive")
        q.setflags(write=False)
        r.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "rate_matrix", q)
        object.__setattr__(self, "rate_fn", r)
        object.__setattr__(self, "stationary", m)

    @property
    def mean_rate(self) -> float:
        """Time-average data rate sum_i r(i) m(i)."""
        return float(self.stationary @ self.rate_fn)


def _strongly_connected(adj: np.ndarray) -> bool:
    # reachability from state 0 along edges and reversed edges
    n = adj.shape[0]
    for a in (adj, adj.T):
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            nxt = np.flatnonzero(a[frontier].any(axis=0) & ~seen)
            seen[nxt] = True
            frontier = list(nxt)
        if not seen.all():
            return False
    return True


def _stationary_law(q: np.ndarray) -> np.ndarray:
    # m Q = 0 with one equation replaced by the normalization sum(m) = 1
    n = q.shape[0]
    a = q.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    m = np.linalg.solve(a, b)
    if m.min() < -1e-12:
        raise ValueError("stationary solve produced negative probabilities")
    # clip float noise in vanishing tail states so m is a usable sampling law
    m = np.maximum(m, 0.0)
    return m / m.sum()


def onoff_chain(alpha: float, beta: float, on_rate: float = 1.0) -> MarkovChainSpec:
    """Two-state ON-OFF link: OFF (state 0, rate 0) <-> ON (state 1, rate on_rate).

    alpha is the ON->OFF transition rate, beta the OFF->ON rate, so the
    stationary ON probability is beta / (alpha + beta).
    """
    if alpha <= 0 or beta <= 0 or on_rate <= 0:
        raise ValueError("alpha, beta and on_rate must be positive")
    q = np.array([[-beta, beta], [alpha, -alpha]], dtype=float)
    return MarkovChainSpec(2, q, np.array([0.0, on_rate]))


def mm1_chain(
    lam: float,
    mu: float,
    n_states: int = 200,
    rate_fn: Callable[[int], float] | None = None,
) -> MarkovChainSpec:
    """Truncated M/M/1 queue of competing small flows sharing the link.

    State n is the number of small flows; the streaming flow then gets rate
    ``rate_fn(n)`` (fair sharing 1/(1+n) by default). The birth rate in the
    top state is removed, which keeps the truncated stationary law geometric.
    """
    if lam <= 0 or mu <= 0:
        raise ValueError("lam and mu must be positive")
    if lam >= mu:
        raise ValueError("load lam/mu must be < 1")
    if n_states < 2:
        raise ValueError("need at least 2 states")
    if rate_fn is None:
        rate_fn = fair_sharing_rate
    q = np.zeros((n_states, n_states))
    for n in range(n_states - 1):
        q[n, n + 1] = lam
    for n in range(1, n_states):
        q[n, n - 1] = mu
    np.fill_diagonal(q, -q.sum(axis=1))
    r = np.array([rate_fn(n) for n in range(n_states)], dtype=float)
    return MarkovChainSpec(n_states, q, r)


def fair_sharing_rate(n: int) -> float:
    """Streaming-flow rate under fair sharing with n competing flows."""
    return 1.0 / (1.0 + n)


# ---------------------------------------------------------------------------
# Delay models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Exponential:
    rate: float

    def __post_init__(self):
        if not (math.isfinite(self.rate) and self.rate > 0):
            raise ValueError("rate must be positive and finite")


@dataclass(frozen=True)
class Gaussian:
    mean: float
    variance: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and self.mean > 0):
            raise ValueError("mean must be positive and finite")
        if not (math.isfinite(self.variance) and self.variance > 0):
            raise ValueError("variance must be positive and finite")


@dataclass(frozen=True)
class Csma:
    """Random-access link. Per frame: one slot, plus a Uniform[0, window*slot]
    backoff for each of a Geometric(success) number of failed attempts."""

    success: float
    window: float
    slot: float
    frames_per_chunk: int

    def __post_init__(self):
        if not 0.0 < self.success < 1.0:
            raise ValueError("success probability must lie in (0, 1)")
        if self.window <= 0 or self.slot <= 0:
            raise ValueError("window and slot must be positive")
        if self.frames_per_chunk < 1:
            raise ValueError("frames_per_chunk must be >= 1")


@dataclass(frozen=True)
class Scheduler:
    """Channel-aware scheduling among many flows: a frame takes 1 + Geometric(success) slots."""

    success: float
    slot: float
    frames_per_chunk: int

    def __post_init__(self):
        if not 0.0 < self.success < 1.0:
            raise ValueError("success probability must lie in (0, 1)")
        if self.slot <= 0:
            raise ValueError("slot must be positive")
        if self.frames_per_chunk < 1:
            raise ValueError("frames_per_chunk must be >= 1")


@dataclass(frozen=True)
class MarkovLink:
    """Link whose instantaneous rate is r(S(speed * t)) for a CTMC S."""

    spec: MarkovChainSpec
    speed: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.speed) and self.speed > 0):
            raise ValueError("speed must be positive and finite")


@dataclass(frozen=True)
class EmpiricalTrace:
    """Bootstrap model: delays drawn i.i.d. with replacement from a trace."""

    samples: tuple[float, ...]

    def __post_init__(self):
        if len(self.samples) == 0:
            raise ValueError("trace must be nonempty")
        for i, x in enumerate(self.samples):
            if not (math.isfinite(x) and x > 0):
                raise ValueError(f"samples[{i}] must be positive and finite, got {x}")
        object.__setattr__(self, "samples", tuple(float(x) for x in self.samples))


DelayModel = Union[Exponential, Gaussian, Csma, Scheduler, MarkovLink, EmpiricalTrace]

_ANALYTIC = (Exponential, Gaussian, Csma, Scheduler)


# ---------------------------------------------------------------------------
# Analytic descriptors
# ---------------------------------------------------------------------------

def exprel(a: float) -> float:
    """(e^a - 1) / a, continued as 1 at a = 0.

    A 4-term Taylor expansion is used for |a| < 1e-4 to avoid cancellation.
    """
    if abs(a) < 1e-4:
        return 1.0 + a / 2.0 + a * a / 6.0 + a * a * a / 24.0
    return math.expm1(a) / a


def cgf(model: DelayModel, a: float) -> float:
    """Cumulant generating function G(a) = log E[exp(a X)] of one chunk delay.

    Out-of-domain arguments (where the moment generating function diverges)
    return +inf rather than raising. Models without a closed form
    (MarkovLink, EmpiricalTrace) raise NoAnalyticCgf.
    """
    if isinstance(model, Exponential):
        r = model.rate
        if a >= r:
            return math.inf
        return -math.log1p(-a / r)
    if isinstance(model, Gaussian):
        return a * model.mean + 0.5 * a * a * model.variance
    if isinstance(model, Csma):
        p, nf, ts = model.success, model.frames_per_chunk, model.slot
        denom = 1.0 - (1.0 - p) * exprel(a * model.window * ts)
        if denom <= 0.0:
            return math.inf
        return nf * (ts * a + math.log(p / denom))
    if isinstance(model, Scheduler):
        p, nf, ts = model.success, model.frames_per_chunk, model.slot
        denom = 1.0 - (1.0 - p) * math.exp(a * ts)
        if denom <= 0.0:
            return math.inf
        return nf * (ts * a + math.log(p / denom))
    raise NoAnalyticCgf(f"{type(model).__name__} has no analytic CGF")


def cgf_domain_sup(model: DelayModel) -> float:
    """Supremum of {a : G(a) < inf} for models with an analytic CGF."""
    if isinstance(model, Exponential):
        return model.rate
    if isinstance(model, Gaussian):
        return math.inf
    if isinstance(model, Scheduler):
        return -math.log(1.0 - model.success) / model.slot
    if isinstance(model, Csma):
        # solve exprel(x) = 1/(1-p) for x > 0, then divide by window * slot
        target = 1.0 / (1.0 - model.success)
        lo, hi = 0.0, 1.0
        while exprel(hi) < target:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if exprel(mid) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi) / (model.window * model.slot)
    raise NoAnalyticCgf(f"{type(model).__name__} has no analytic CGF")


def support_sup(model: DelayModel) -> float:
    """Essential supremum of one chunk delay (inf for unbounded models)."""
    if isinstance(model, EmpiricalTrace):
        return max(model.samples)
    return math.inf


def moments(model: DelayModel) -> tuple[float, float | None]:
    """Analytic (mean, variance) of one chunk delay.

    For MarkovLink the mean is 1 / mean_rate; its per-chunk variance has no
    closed form here, so it is reported as None (crossing increments are
    correlated -- use the asymptotic variance machinery instead).
    """
    if isinstance(model, Exponential):
        m = 1.0 / model.rate
        return m, m * m
    if isinstance(model, Gaussian):
        return model.mean, model.variance
    if isinstance(model, Csma):
        p, w, ts, nf = model.success, model.window, model.slot, model.frames_per_chunk
        fail = (1.0 - p) / p
        # sum of Geometric(p) uniforms: Wald for the mean, compound-sum variance
        s_mean = fail * 0.5
        s_var = fail / 12.0 + ((1.0 - p) / (p * p)) * 0.25
        frame_mean = ts * (1.0 + w * s_mean)
        frame_var = ts * ts * w * w * s_var
        return nf * frame_mean, nf * frame_var
    if isinstance(model, Scheduler):
        p, ts, nf = model.success, model.slot, model.frames_per_chunk
        frame_mean = ts / p
        frame_var = ts * ts * (1.0 - p) / (p * p)
        return nf * frame_mean, nf * frame_var
    if isinstance(model, EmpiricalTrace):
        x = np.asarray(model.samples)
        return float(x.mean()), float(x.var())
    if isinstance(model, MarkovLink):
        return 1.0 / model.spec.mean_rate, None
    raise TypeError(f"unknown delay model {type(model).__name__}")


def link_rates_for_models(models) -> LinkRates:
    """LinkRates with r_k = 1 / mean(model_k)."""
    return LinkRates.from_rates(1.0 / moments(m)[0] for m in models)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def sample_chunk_delays(model: DelayModel, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `count` successive chunk delays from the model."""
    return sample_chunk_delay_matrix(model, count, 1, rng)[0]


def sample_chunk_delay_matrix(
    model: DelayModel, count: int, n_rows: int, rng: np.random.Generator
) -> np.ndarray:
    """(n_rows, count) array of chunk delays; rows are independent replications.

    For the i.i.d. models every entry is independent; for MarkovLink each row
    is one CTMC trajectory's successive threshold-crossing increments.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if n_rows < 1:
        raise ValueError("n_rows must be >= 1")
    if isinstance(model, Exponential):
        return rng.exponential(1.0 / model.rate, size=(n_rows, count))
    if isinstance(model, Gaussian):
        return _sample_positive_normal(model.mean, math.sqrt(model.variance), (n_rows, count), rng)
    if isinstance(model, Csma):
        ts, w, nf, p = model.slot, model.window, model.frames_per_chunk, model.success
        # slab the rows so the per-call uniform buffer stays modest
        per_row = count * nf * (1.0 - p) / p
        rows_per_slab = max(1, int(2e7 / max(per_row, 1.0)))
        out = np.empty((n_rows, count))
        for lo in range(0, n_rows, rows_per_slab):
            hi = min(lo + rows_per_slab, n_rows)
            failures = rng.negative_binomial(nf, p, size=(hi - lo) * count)
            backoffs = _segment_sums(rng.random(int(failures.sum())), failures)
            out[lo:hi] = (ts * (nf + w * backoffs)).reshape(hi - lo, count)
        return out
    if isinstance(model, Scheduler):
        failures = rng.negative_binomial(model.frames_per_chunk, model.success, size=(n_rows, count))
        return model.slot * (model.frames_per_chunk + failures)
    if isinstance(model, EmpiricalTrace):
        x = np.asarray(model.samples)
        return x[rng.integers(0, len(x), size=(n_rows, count))]
    if isinstance(model, MarkovLink):
        times = ctmc_crossing_times(model.spec, model.speed, count, n_rows, rng)
        return np.diff(times, axis=1, prepend=0.0)
    raise TypeError(f"unknown delay model {type(model).__name__}")


def _sample_positive_normal(mean, std, shape, rng):
    # conditional-on-positive sampling by redrawing the negative entries
    out = rng.normal(mean, std, size=shape)
    for _ in range(1000):
        bad = out <= 0.0
        n_bad = int(bad.sum())
        if n_bad == 0:
            return out
        out[bad] = rng.normal(mean, std, size=n_bad)
    raise RuntimeError("positive-normal rejection sampling did not converge")


def _segment_sums(values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    # sum of consecutive segments of `values` with the given lengths (zeros allowed)
    c = np.concatenate(([0.0], np.cumsum(values)))
    ends = np.cumsum(lengths)
    return c[ends] - c[ends - lengths]


# ---------------------------------------------------------------------------
# CTMC trajectory machinery
# ---------------------------------------------------------------------------

def _embedded_cumprobs(spec: MarkovChainSpec) -> np.ndarray:
    q = spec.rate_matrix
    hold = -np.diag(q)
    p = np.where(hold[:, None] > 0, q / np.where(hold[:, None] > 0, hold[:, None], 1.0), 0.0)
    np.fill_diagonal(p, 0.0)
    return np.cumsum(p, axis=1)


def _next_states(cum: np.ndarray, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(states.size)
    nxt = (u[:, None] > cum[states]).sum(axis=1)
    return np.minimum(nxt, cum.shape[1] - 1)


def ctmc_crossing_times(
    spec: MarkovChainSpec,
    speed: float,
    count: int,
    n_rows: int,
    rng: np.random.Generator,
    record_path: bool = False,
):
    """Times at which the integrated rate of the sped-up chain crosses 1..count.

    Each row is one trajectory started from a stationary state draw. Within a
    sojourn the integrated rate grows linearly, so crossing times are exact:
    the data level is pinned to the integer threshold at each crossing, which
    keeps the bookkeeping free of accumulated drift.

    With record_path=True (single row only) also returns the piecewise
    trajectory as (jump_times, states) for independent re-integration.
    """
    if record_path and n_rows != 1:
        raise ValueError("record_path supports a single trajectory")
    q = spec.rate_matrix
    hold = -np.diag(q).copy()
    rates = spec.rate_fn
    cum = _embedded_cumprobs(spec)

    state = rng.choice(spec.n_states, size=n_rows, p=spec.stationary)
    t = np.zeros(n_rows)
    level = np.zeros(n_rows)
    done_at = np.zeros(n_rows, dtype=np.int64)  # crossings emitted so far
    out = np.zeros((n_rows, count))
    active = np.ones(n_rows, dtype=bool)

    path_times, path_states = [0.0], [int(state[0])]

    while active.any():
        jump_rate = speed * hold[state]
        draw = rng.exponential(size=n_rows)
        with np.errstate(divide="ignore"):
            remaining = np.where(jump_rate > 0, draw / np.maximum(jump_rate, 1e-300), np.inf)
        r_now = rates[state]
        # emit every threshold crossed during this sojourn
        while True:
            crossing = active & (r_now > 0) & (level + r_now * remaining >= done_at + 1.0)
            if not crossing.any():
                break
            dt = (done_at[crossing] + 1.0 - level[crossing]) / r_now[crossing]
            t[crossing] += dt
            remaining[crossing] -= dt
            level[crossing] = done_at[crossing] + 1.0
            out[crossing, done_at[crossing]] = t[crossing]
            done_at[crossing] += 1
            active &= done_at < count
        alive = active & np.isfinite(remaining)
        t[alive] += remaining[alive]
        level[alive] += r_now[alive] * remaining[alive]
        nxt = _next_states(cum, state, rng)
        state = np.where(alive, nxt, state)
        if record_path and active[0]:
            path_times.append(float(t[0]))
            path_states.append(int(state[0]))
    if record_path:
        return out, (np.array(path_times), np.array(path_states, dtype=int))
    return out


def integrated_rate(
    spec: MarkovChainSpec,
    speed: float,
    t_end: float,
    n_rows: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Data received over [0, t_end] by each of n_rows stationary trajectories."""
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    hold = -np.diag(spec.rate_matrix).copy()
    rates = spec.rate_fn
    cum = _embedded_cumprobs(spec)

    state = rng.choice(spec.n_states, size=n_rows, p=spec.stationary)
    t = np.zeros(n_rows)
    data = np.zeros(n_rows)
    active = np.ones(n_rows, dtype=bool)
    while active.any():
        jump_rate = speed * hold[state]
        draw = rng.exponential(size=n_rows)
        with np.errstate(divide="ignore"):
            sojourn = np.where(jump_rate > 0, draw / np.maximum(jump_rate, 1e-300), np.inf)
        dt = np.where(active, np.minimum(sojourn, t_end - t), 0.0)
        data += rates[state] * dt
        t += dt
        still = active & (t < t_end)
        nxt = _next_states(cum, state, rng)
        state = np.where(still, nxt, state)
        active = still
    return data
