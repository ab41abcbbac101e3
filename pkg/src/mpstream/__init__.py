"""Multipath chunk streaming: starvation simulation, analytic bounds, and
pre-buffering selection."""

__version__ = "0.1.0"

from .core import (
    ChunkSchedule,
    LinkRates,
    SimConfig,
    StarvationEstimate,
    link_rates_from_means,
    regime,
)
from .delays import (
    Csma,
    EmpiricalTrace,
    Exponential,
    Gaussian,
    MarkovChainSpec,
    MarkovLink,
    Scheduler,
    cgf,
    moments,
    sample_chunk_delays,
)
from .policy import build_bernoulli, build_upper_balanced, verify_upper_balanced
from .montecarlo import (
    estimate_accelerated_markov,
    estimate_oracle_lower_bound,
    estimate_starvation,
    starvation_curve,
)
from .bounds import (
    asym_var_fair_sharing,
    asym_var_onoff,
    clt_lower_bound,
    diffusion_bound,
    diffusion_bound_physical,
    exponent_exponential,
    exponent_root,
    exponent_subgaussian,
    iid_subgaussian_bound,
    iid_upper_bound,
    lambert_w0,
    poisson_solve,
    psi,
)
from .prebuffer import PrebufferResult, select_prebuffer
from .traces import Trace, autocorrelation, load_trace

__all__ = [name for name in dir() if not name.startswith("_")]
