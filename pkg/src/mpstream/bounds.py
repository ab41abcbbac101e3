"""Closed-form starvation machinery: tail exponents, probability bounds,
and asymptotic variances of Markov-modulated links.

Conventions used throughout:

* ``F_k(a) = G_k(a) - a / f_k`` is the drift-adjusted cumulant function of
  link k. In underload (R > 1) it dips negative near 0 and recrosses zero at
  the tail exponent ``a_k*``, the largest root of F_k. The per-link
  starvation factor then decays like ``exp(-a_k* b)`` in the margin b.
* Product-form bounds ``1 - prod_k (1 - x_k)`` require independent links;
  union-form bounds ``sum_k x_k`` do not.
* The margin b relates to the total pre-buffer as B = b + K - 1 in underload
  and B = (1/R - 1) N + b + K - 1 at or past the critical point.
* All bound values are clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CRITICAL, LinkRates, OVERLOAD, UNDERLOAD, regime
from .delays import DelayModel, MarkovChainSpec, cgf, cgf_domain_sup, support_sup

ROOT_RESIDUAL_TOL = 1e-9
POISSON_RESIDUAL_TOL = 1e-9

LAMBERT_CLOSED_FORM = "lambert_closed_form"
BISECTION = "bisection"
SUBGAUSSIAN_LOWER = "subgaussian_lower"
BOUNDED_SUPPORT = "bounded_support"


class RegimeError(ValueError):
    """Raised when an operation is applied outside its load regime."""


class NumericsError(RuntimeError):
    """Raised when a root-finding or linear-algebra step fails its residual check."""


# ---------------------------------------------------------------------------
# Special functions
# ---------------------------------------------------------------------------

def psi(x) -> float:
    """Complementary standard-normal CDF, P[Z > x], via erfc."""
    if np.ndim(x) == 0:
        return 0.5 * math.erfc(float(x) / math.sqrt(2.0))
    x = np.asarray(x, dtype=float)
    return 0.5 * np.array([math.erfc(v / math.sqrt(2.0)) for v in x.ravel()]).reshape(x.shape)


def lambert_w0(x: float) -> float:
    """Principal branch of the Lambert W function: w * e^w = x for x >= -1/e.

    Halley iteration from a series/asymptotic initial guess; the residual
    |w e^w - x| is driven below 1e-12 * max(1, |x|).
    """
    if not math.isfinite(x):
        raise ValueError("argument must be finite")
    branch = -1.0 / math.e
    if x < branch:
        # tolerate representation error of -1/e itself
        if x < branch - 1e-12 * max(1.0, abs(branch)):
            raise ValueError(f"lambert_w0 requires x >= -1/e, got {x}")
        x = branch
    # initial guess
    p2 = 2.0 * (math.e * x + 1.0)
    if p2 <= 0.0:
        return -1.0
    if x < -0.25:
        p = math.sqrt(p2)
        w = -1.0 + p - p * p / 3.0
    elif x < 1.0:
        w = x * (1.0 - x)  # two terms of the Taylor series at 0
    else:
        lx = math.log(x)
        w = lx - math.log(lx) if lx > 1.0 else lx
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= dw
        if abs(dw) <= 1e-16 * (1.0 + abs(w)):
            break
    if abs(w * math.exp(w) - x) > 1e-12 * max(1.0, abs(x)):
        raise NumericsError(f"lambert_w0 failed to converge at x={x}")
    return w


# ---------------------------------------------------------------------------
# Tail exponents
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentResult:
    """Largest root a* of F_k (math.inf when the delay is a.s. below 1/f_k)."""

    a_star: float
    f_at_root: float
    method: str


def drift_adjusted_cgf(model: DelayModel, frequency: float, a: float) -> float:
    """F(a) = G(a) - a / frequency for the given model."""
    return cgf(model, a) - a / frequency


def exponent_exponential(rate: float, sum_rate: float) -> ExponentResult:
    """Closed-form exponent for exponential delays in underload.

    a* = rate * (1 + W0(-R e^{-R}) / R), the nonzero solution of
    -ln(1 - a/rate) = a R / rate.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if sum_rate <= 1.0:
        raise RegimeError("exponential exponent requires underload (R > 1)")
    w = lambert_w0(-sum_rate * math.exp(-sum_rate))
    a_star = rate * (1.0 + w / sum_rate)
    f = -math.log1p(-a_star / rate) - a_star * sum_rate / rate
    return ExponentResult(a_star=a_star, f_at_root=abs(f), method=LAMBERT_CLOSED_FORM)


def exponent_root(model: DelayModel, frequency: float) -> ExponentResult:
    """Largest positive root of F(a) = G(a) - a / frequency, by bisection.

    If the delay is almost surely below 1/frequency (bounded support), the
    maximal-sum event can never be triggered and the exponent is +inf, making
    the corresponding bound factor exactly 0 for any positive margin.
    """
    if not 0.0 < frequency <= 1.0:
        raise ValueError("frequency must lie in (0, 1]")
    if support_sup(model) < 1.0 / frequency:
        return ExponentResult(a_star=math.inf, f_at_root=0.0, method=BOUNDED_SUPPORT)

    edge = cgf_domain_sup(model)

    def f(a: float) -> float:
        return cgf(model, a) - a / frequency

    # locate a point with F < 0 (exists because F'(0) < 0 in underload)
    scale = edge if math.isfinite(edge) else 1.0
    lo = None
    step = scale
    for _ in range(80):
        step *= 0.5
        if f(step) < 0.0:
            lo = step
            break
    if lo is None:
        raise NumericsError("could not find F < 0 near zero; is the regime underloaded?")
    # expand upward until F > 0, approaching a finite domain edge geometrically
    hi = None
    if math.isfinite(edge):
        gap = edge - lo
        for i in range(1, 200):
            cand = edge - gap * 0.5**i
            if f(cand) > 0.0:
                hi = cand
                break
    else:
        cand = 2.0 * lo
        for _ in range(200):
            if f(cand) > 0.0:
                hi = cand
                break
            cand *= 2.0
    if hi is None:
        raise NumericsError(
            "no sign change of F inside the CGF domain "
            f"(model={type(model).__name__}, frequency={frequency})"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if f(mid) < 0.0:
            lo = mid
        else:
            hi = mid
    a_star = hi
    resid = abs(f(a_star))
    if resid > ROOT_RESIDUAL_TOL:
        raise NumericsError(f"root residual {resid} exceeds {ROOT_RESIDUAL_TOL}")
    return ExponentResult(a_star=a_star, f_at_root=resid, method=BISECTION)


def exponent_subgaussian(mean: float, proxy: float, sum_rate: float) -> float:
    """Guaranteed exponent lower bound 2 * mean * (R - 1) / proxy.

    Valid whenever the delay is sub-Gaussian with variance proxy v^2; exact
    for Gaussian delays with v^2 equal to the true variance.
    """
    if mean <= 0 or proxy <= 0:
        raise ValueError("mean and proxy must be positive")
    if sum_rate < 1.0:
        raise RegimeError("sub-Gaussian exponent requires R >= 1")
    return 2.0 * mean * (sum_rate - 1.0) / proxy


# ---------------------------------------------------------------------------
# Bound combinators
# ---------------------------------------------------------------------------

def _combine(factors: Sequence[float], variant: str) -> float:
    factors = [min(max(x, 0.0), 1.0) for x in factors]
    if variant == "product":
        prod = 1.0
        for x in factors:
            prod *= 1.0 - x
        return min(max(1.0 - prod, 0.0), 1.0)
    if variant == "union":
        return min(sum(factors), 1.0)
    raise ValueError(f"variant must be 'product' or 'union', got {variant!r}")


def _golden_minimize(fn, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Golden-section minimum of a unimodal function on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(400):
        if b - a <= tol * max(1.0, abs(a)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return min((fn(0.5 * (a + b)), 0.5 * (a + b)), (fc, c), (fd, d))[1]


def _optimized_factor(model: DelayModel, frequency: float, n_link: float, b: float) -> float:
    """min over {a : F(a) >= 0} of exp(n_link * F(a) - a * b)."""
    if support_sup(model) < 1.0 / frequency:
        return 0.0 if b > 0 else 1.0
    try:
        # underload: the admissible set starts at the exponent a*
        lo = exponent_root(model, frequency).a_star
    except NumericsError:
        # critical/overload: F >= 0 on all of [0, edge)
        lo = 0.0
    edge = cgf_domain_sup(model)

    def objective(a: float) -> float:
        return n_link * drift_adjusted_cgf(model, frequency, a) - a * b
    if math.isfinite(edge):
        hi = edge - 1e-6 * max(edge, 1.0)
        if hi <= lo:
            hi = lo
    else:
        hi = max(2.0 * lo, 1.0)
        prev = objective(hi)
        for _ in range(200):
            cand = 2.0 * hi
            val = objective(cand)
            if val > prev:
                break
            hi, prev = cand, val
        hi *= 2.0
    a_opt = _golden_minimize(objective, lo, hi) if hi > lo else lo
    best = min(objective(a_opt), objective(lo))
    return math.exp(min(best, 0.0))


def iid_upper_bound(
    rates: LinkRates,
    models: Sequence[DelayModel],
    n_chunks: int,
    b: float,
    variant: str = "product",
    optimize: bool = False,
) -> float:
    """Upper bound on starvation of an upper-balanced schedule with margin b.

    The per-link factor is min over the admissible tilt a of
    exp(N_k F_k(a) - a b) with N_k = f_k N. With optimize=False the tilt is
    pinned to the exponent a_k*, giving the fast exp(-a_k* b) form (requires
    underload); optimize=True searches the whole admissible set and is valid
    in every regime. The bound covers total pre-buffer b + K - 1.
    """
    if rates.n_links != len(models):
        raise ValueError("one delay model per link is required")
    if b < 0:
        raise ValueError("margin b must be >= 0")
    if not optimize and regime(rates) != UNDERLOAD:
        raise RegimeError("optimize=False requires underload (R > 1)")
    factors = []
    for model, f_k in zip(models, rates.frequencies):
        if optimize:
            factors.append(_optimized_factor(model, f_k, f_k * n_chunks, b))
        else:
            a_star = exponent_root(model, f_k).a_star
            if math.isinf(a_star):
                factors.append(0.0 if b > 0 else 1.0)
            else:
                factors.append(math.exp(-a_star * b))
    return _combine(factors, variant)


def iid_subgaussian_bound(
    rates: LinkRates,
    proxies: Sequence[float],
    n_chunks: int,
    b: float,
    variant: str = "product",
) -> float:
    """Critical/overload bound with per-link factors exp(-b^2 / (2 v_k^2 N f_k)).

    Covers total pre-buffer (1/R - 1) N + b + K - 1; requires R <= 1 and
    sub-Gaussian proxies v_k^2.
    """
    if rates.n_links != len(proxies):
        raise ValueError("one variance proxy per link is required")
    if regime(rates) == UNDERLOAD:
        raise RegimeError("sub-Gaussian bound requires R <= 1; use iid_upper_bound")
    if b <= 0:
        return 1.0
    if any(v <= 0 for v in proxies):
        raise ValueError("variance proxies must be positive")
    factors = [
        math.exp(-b * b / (2.0 * v * n_chunks * f_k))
        for v, f_k in zip(proxies, rates.frequencies)
    ]
    return _combine(factors, variant)


def clt_lower_bound(rates: LinkRates, variances: Sequence[float], b: float) -> float:
    """Large-file lower bound prod_k Psi(b / (sigma_k sqrt(f_k))) for any policy.

    Asymptotic (N -> inf) bound at pre-buffer (1/R - 1) N + b sqrt(N);
    requires R <= 1 and per-link delay variances sigma_k^2.
    """
    if rates.n_links != len(variances):
        raise ValueError("one variance per link is required")
    if regime(rates) == UNDERLOAD:
        raise RegimeError("CLT lower bound requires R <= 1")
    if any(v <= 0 for v in variances):
        raise ValueError("variances must be positive")
    prod = 1.0
    for v, f_k in zip(variances, rates.frequencies):
        prod *= psi(b / (math.sqrt(v) * math.sqrt(f_k)))
    return prod


# ---------------------------------------------------------------------------
# Markov-modulated links: Poisson equation and asymptotic variance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoissonSolution:
    """Solution of Q g = r - r_bar with gauge m.g = 0, and the implied variance."""

    g: np.ndarray
    mean_rate: float
    asym_var: float


def poisson_solve(spec: MarkovChainSpec) -> PoissonSolution:
    """Solve the generator Poisson equation and compute the asymptotic variance.

    The singular system Q g = r - r_bar is closed by replacing one equation
    with the normalization m.g = 0 and solved densely. The replaced row is
    the one with the largest stationary mass: that balance equation is the
    most redundant one, and dropping a negligible-mass row instead makes the
    solve exponentially ill-conditioned for truncated birth-death chains.
    The variance of the Wiener limit of the centered integrated rate is

        sigma_bar^2 = -2 sum_i (r(i) - r_bar) g(i) m(i).

    The centering makes the value invariant to the additive gauge freedom of
    g (the raw form -2 sum_i r(i) g(i) m(i) is gauge-dependent).
    """
    q = spec.rate_matrix
    r = spec.rate_fn
    m = spec.stationary
    r_bar = spec.mean_rate
    rhs = r - r_bar
    n = spec.n_states
    drop = int(np.argmax(m))
    a = q.copy()
    a[drop, :] = m
    b = rhs.copy()
    b[drop] = 0.0
    try:
        g = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"Poisson solve failed: {exc}") from exc
    resid = float(np.max(np.abs(q @ g - rhs))) if n > 1 else 0.0
    if resid > POISSON_RESIDUAL_TOL:
        raise NumericsError(f"Poisson residual {resid} exceeds {POISSON_RESIDUAL_TOL}")
    var = -2.0 * float(np.sum((r - r_bar) * g * m))
    g = g - float(m @ g)  # report in the m.g = 0 gauge
    g.setflags(write=False)
    return PoissonSolution(g=g, mean_rate=r_bar, asym_var=max(var, 0.0))


def asym_var_onoff(alpha: float, beta: float) -> float:
    """Asymptotic variance 2 alpha beta / (alpha + beta)^3 of the unit-rate ON-OFF link."""
    if alpha <= 0 or beta <= 0:
        raise ValueError("alpha and beta must be positive")
    s = alpha + beta
    return 2.0 * beta * alpha / (s * s * s)


def asym_var_fair_sharing(
    lam: float,
    mu: float,
    rate_fn=None,
    tol: float = 1e-12,
) -> float:
    """Asymptotic variance of a link shared with M/M/1 small flows.

    Evaluates (2 / mu) * sum_{n >= 0} sum_{i < n} Rb(n) Rb(i) (rho^n - rho^i)
    with Rb(n) = rate_fn(n) - r_bar, truncated once the geometric tail falls
    below `tol` relative to the accumulated magnitude. Default rate_fn is
    fair sharing 1/(1+n).
    """
    if lam <= 0 or mu <= 0:
        raise ValueError("lam and mu must be positive")
    rho = lam / mu
    if rho >= 1.0:
        raise ValueError("stability requires rho = lam/mu < 1")
    if rate_fn is None:
        from .delays import fair_sharing_rate

        rate_fn = fair_sharing_rate

    n_max = max(64, int(math.log(tol) / math.log(rho)) + 64)
    n_max = min(n_max, 1_000_000)
    n_idx = np.arange(n_max)
    r = np.array([rate_fn(int(n)) for n in n_idx], dtype=float)
    if np.any(~np.isfinite(r)) or np.any(r < 0):
        raise ValueError("rate_fn must be finite and >= 0")
    w = rho**n_idx * (1.0 - rho)
    r_bar = float(np.sum(r * w))
    rb = r - r_bar
    # inner sums via prefix accumulation: term(n) = Rb(n) (rho^n A(n) - Bsum(n))
    rho_n = rho**n_idx
    a_prefix = np.concatenate(([0.0], np.cumsum(rb)))[:-1]
    b_prefix = np.concatenate(([0.0], np.cumsum(rb * rho_n)))[:-1]
    terms = rb * (rho_n * a_prefix - b_prefix)
    return (2.0 / mu) * float(np.sum(terms))


# ---------------------------------------------------------------------------
# Diffusion bounds
# ---------------------------------------------------------------------------

def diffusion_bound(
    rates: LinkRates,
    asym_vars: Sequence[float],
    n_chunks: int,
    c1: float,
    c2: float,
    variant: str = "product",
) -> float:
    """Fast-link-variation bound from the Wiener limit of the integrated rate.

    c1 >= 0 is the drift constant (criticality gap scale), c2 > 0 the buffer
    constant. With c1 = 0 the per-link factor is the reflection-principle
    crossing probability 2 Psi(r_k c2 / (sbar_k sqrt(N + K - 1))); with
    c1 > 0 it is the drifted level-crossing form exp(-2 r_k^2 c1 c2 / sbar_k^2).
    """
    if rates.n_links != len(asym_vars):
        raise ValueError("one asymptotic variance per link is required")
    if c2 <= 0:
        return 1.0
    if c1 < 0:
        raise ValueError("c1 must be >= 0")
    if any(v <= 0 for v in asym_vars):
        raise ValueError("asymptotic variances must be positive")
    horizon = n_chunks + rates.n_links - 1
    factors = []
    for r_k, var_k in zip(rates.rates, asym_vars):
        sd = math.sqrt(var_k)
        if c1 == 0.0:
            factors.append(2.0 * psi(r_k * c2 / (sd * math.sqrt(horizon))))
        else:
            factors.append(math.exp(-2.0 * r_k * r_k * c1 * c2 / var_k))
    return _combine(factors, variant)


def diffusion_bound_physical(
    rates: LinkRates,
    asym_vars: Sequence[float],
    n_chunks: int,
    b: float,
    variant: str = "product",
) -> float:
    """Diffusion approximation at physical (unscaled) parameters and margin b.

    Maps the sum rate R >= 1 and margin b onto the drift/buffer constants via
    c1 * c2 = b * (1 - 1/R): exactly the reflection form with c2 = b at
    R = 1, and exp(-2 r_k^2 (1 - 1/R) b / sbar_k^2) factors when R > 1.
    This is an approximation of the pre-buffer b + K - 1 starvation
    probability, not a proven bound.
    """
    r_sum = rates.sum_rate
    reg = regime(rates)
    if reg == OVERLOAD:
        raise RegimeError("diffusion approximation requires R >= 1")
    if b <= 0:
        return 1.0
    if reg == CRITICAL:
        return diffusion_bound(rates, asym_vars, n_chunks, 0.0, b, variant)
    if any(v <= 0 for v in asym_vars):
        raise ValueError("asymptotic variances must be positive")
    gap = 1.0 - 1.0 / r_sum
    factors = [
        math.exp(-2.0 * r_k * r_k * gap * b / var_k)
        for r_k, var_k in zip(rates.rates, asym_vars)
    ]
    return _combine(factors, variant)
