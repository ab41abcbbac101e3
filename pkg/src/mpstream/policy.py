"""Static chunk-request policies and their balance verification.

The workhorse is the greedy upper-balanced construction: chunk n goes to the
link minimizing (d_k + 1) / f_k, which guarantees that no link ever runs more
than K - 1 chunks ahead of its load-balancing target n * f_k. Bernoulli
routing is included as the baseline whose imbalance grows like sqrt(n).
"""

from __future__ import annotations

import numpy as np

from .core import ChunkSchedule, LinkRates

BALANCE_TOL = 1e-9


def build_upper_balanced(rates: LinkRates, n_chunks: int) -> ChunkSchedule:
    """Greedy schedule: pick argmin_k (d_k + 1) / f_k, ties to the smallest index.

    Runs in O(N * K) time and O(K) working memory. The result satisfies
    d_k(n) <= (n + K - 1) * f_k for every link k and prefix length n, and is a
    pure function of (frequencies, n_chunks).
    """
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    f = rates.frequencies
    n_links = len(f)
    counts = [0] * n_links
    keys = [1.0 / fk for fk in f]
    assignment = np.empty(n_chunks, dtype=np.int64)
    for n in range(n_chunks):
        best = keys[0]
        pick = 0
        for k in range(1, n_links):
            v = keys[k]
            if v < best:
                best = v
                pick = k
        assignment[n] = pick
        counts[pick] += 1
        keys[pick] = (counts[pick] + 1) / f[pick]
    return ChunkSchedule(assignment=assignment, n_links=n_links)


def verify_upper_balanced(
    schedule: ChunkSchedule, rates: LinkRates
) -> tuple[bool, tuple[int, int] | None]:
    """Check d_k(n) <= (n + K - 1) * f_k for all k, n (slack BALANCE_TOL).

    Returns (True, None) when the schedule is upper balanced, otherwise
    (False, (n, k)) with the smallest violating prefix length n (1-based) and
    its link k (0-based, smallest index at that n).
    """
    if schedule.n_links != rates.n_links:
        raise ValueError(
            f"schedule has {schedule.n_links} links but rates describe {rates.n_links}"
        )
    k_minus_1 = rates.n_links - 1
    counts = schedule.running_counts().astype(float)
    n = np.arange(1, schedule.n_chunks + 1, dtype=float)
    caps = np.outer(np.asarray(rates.frequencies), n + k_minus_1)
    bad = counts > caps + BALANCE_TOL
    if not bad.any():
        return True, None
    by_n = bad.any(axis=0)
    first_n = int(np.argmax(by_n))
    first_k = int(np.argmax(bad[:, first_n]))
    return False, (first_n + 1, first_k)


def max_balance_slack(schedule: ChunkSchedule, rates: LinkRates) -> float:
    """max over (k, n) of d_k(n) - (n + K - 1) * f_k; <= 0 iff upper balanced."""
    if schedule.n_links != rates.n_links:
        raise ValueError("schedule/rates link-count mismatch")
    counts = schedule.running_counts().astype(float)
    n = np.arange(1, schedule.n_chunks + 1, dtype=float)
    caps = np.outer(np.asarray(rates.frequencies), n + rates.n_links - 1)
    return float((counts - caps).max())


def build_bernoulli(
    rates: LinkRates, n_chunks: int, rng: np.random.Generator
) -> ChunkSchedule:
    """Randomized baseline: each chunk goes to link k independently w.p. f_k."""
    if n_chunks < 1:
        raise ValueError("n_chunks must be >= 1")
    assignment = rng.choice(rates.n_links, size=n_chunks, p=np.asarray(rates.frequencies))
    return ChunkSchedule(assignment=assignment, n_links=rates.n_links)
