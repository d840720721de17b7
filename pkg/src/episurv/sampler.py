"""Posterior sampling via a blocked MCMC scheme tailored to the model.

Per iteration: the three precision parameters are Gibbs-sampled from their
closed-form Gamma full conditionals; the transition probabilities and
outbreak coefficients get random-walk Metropolis moves on logit/log scales;
the seasonal and spatial fields are updated jointly on their free
coordinates (the last component follows deterministically from the
sum-to-zero constraint) with a covariance-adapting proposal; the trend is
updated in contiguous blocks drawn from its conditional prior given the
rest (so acceptance reduces to a likelihood ratio), plus one global
adaptive random-walk refresh.

Proposal scales adapt toward target acceptance rates of 0.44 (scalar) and
0.234 (joint) by Robbins-Monro/robust-shape updates with decay exponent
0.66; adaptation freezes at the end of warmup.  Chains use private RNG
streams derived from (seed, chain index), so runs are reproducible
regardless of how chains are scheduled.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from scipy.linalg import cholesky as dense_cholesky
from scipy.linalg import solve_triangular
from scipy.special import expit, ndtri
from scipy.stats import rankdata

from .data import structure_matrix_crw1, structure_matrix_rw2, structure_matrix_spatial
from .hmm import LikelihoodWorkspace
from .model import (DEFAULT_HYPERPRIORS, GammaPrior, Hyperpriors, ModelSpec,
                    Parameters, beta_logpdf, gamma_logpdf, log_prior)

SCALAR_ACCEPT_TARGET = 0.44


@dataclass
class SamplerConfig:
    """Chain layout and adaptation settings."""

    n_chains: int = 4
    n_iterations: int = 5000
    n_warmup: int = 2500
    thin: int = 1
    seed: int = 0
    trend_block_size: int = 10
    adapt_target: float = 0.234  # joint (multi-coordinate) proposals
    adapt_rate_decay: float = 0.66
    recenter_every: int = 100

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.n_warmup < self.n_iterations:
            raise ValueError("need 0 <= n_warmup < n_iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.trend_block_size < 1:
            raise ValueError("trend_block_size must be >= 1")
        if not 0.0 < self.adapt_target < 1.0:
            raise ValueError("adapt_target must lie in (0, 1)")
        if not 0.5 < self.adapt_rate_decay <= 1.0:
            raise ValueError("adapt_rate_decay must lie in (0.5, 1]")

    @classmethod
    def from_config(cls, mapping) -> "SamplerConfig":
        kwargs = {}
        for f in ("n_chains", "n_iterations", "n_warmup", "thin", "seed",
                  "trend_block_size", "recenter_every"):
            if f in mapping:
                kwargs[f] = int(mapping[f])
        for f in ("adapt_target", "adapt_rate_decay"):
            if f in mapping:
                kwargs[f] = float(mapping[f])
        return cls(**kwargs)

    def to_config(self) -> dict:
        return {f: getattr(self, f) for f in (
            "n_chains", "n_iterations", "n_warmup", "thin", "seed",
            "trend_block_size", "adapt_target", "adapt_rate_decay", "recenter_every")}


@dataclass(frozen=True)
class ParameterLayout:
    """Flat draw-vector layout for one model: trend, seasonal, spatial,
    precisions, then (when the variant has an outbreak term) coefficients
    and transition probabilities."""

    n_times: int
    n_locations: int
    cycle_length: int
    covariate_dim: int

    @classmethod
    def for_spec(cls, spec: ModelSpec, n_times: int, n_locations: int) -> "ParameterLayout":
        return cls(n_times=n_times, n_locations=n_locations,
                   cycle_length=spec.cycle_length, covariate_dim=spec.covariate_dim)

    @property
    def trend(self) -> slice:
        return slice(0, self.n_times)

    @property
    def seasonal(self) -> slice:
        start = self.n_times
        return slice(start, start + self.cycle_length)

    @property
    def spatial(self) -> slice:
        start = self.n_times + self.cycle_length
        return slice(start, start + self.n_locations)

    @property
    def kappas(self) -> slice:
        start = self.n_times + self.cycle_length + self.n_locations
        return slice(start, start + 3)

    @property
    def beta(self) -> slice:
        start = self.kappas.stop
        return slice(start, start + self.covariate_dim)

    @property
    def gammas(self) -> slice:
        start = self.beta.stop
        width = 2 if self.covariate_dim else 0
        return slice(start, start + width)

    @property
    def dim(self) -> int:
        return self.gammas.stop

    def names(self) -> list[str]:
        out = [f"trend_{t + 1}" for t in range(self.n_times)]
        out += [f"seasonal_{c + 1}" for c in range(self.cycle_length)]
        out += [f"spatial_{i + 1}" for i in range(self.n_locations)]
        out += ["kappa_trend", "kappa_seasonal", "kappa_spatial"]
        out += [f"beta_{j + 1}" for j in range(self.covariate_dim)]
        if self.covariate_dim:
            out += ["gamma01", "gamma10"]
        return out

    def pack(self, params: Parameters) -> np.ndarray:
        vec = np.empty(self.dim)
        vec[self.trend] = params.trend
        vec[self.seasonal] = params.seasonal
        vec[self.spatial] = params.spatial
        vec[self.kappas] = (params.kappa_trend, params.kappa_seasonal, params.kappa_spatial)
        if self.covariate_dim:
            vec[self.beta] = params.beta
            vec[self.gammas] = (params.gamma01, params.gamma10)
        return vec

    def unpack(self, vec: np.ndarray) -> Parameters:
        kappas = vec[self.kappas]
        if self.covariate_dim:
            gam = vec[self.gammas]
            beta = vec[self.beta].copy()
            gamma01, gamma10 = float(gam[0]), float(gam[1])
        else:
            beta = np.empty(0)
            gamma01 = gamma10 = 0.5
        return Parameters(
            trend=vec[self.trend].copy(), seasonal=vec[self.seasonal].copy(),
            spatial=vec[self.spatial].copy(), kappa_trend=float(kappas[0]),
            kappa_seasonal=float(kappas[1]), kappa_spatial=float(kappas[2]),
            beta=beta, gamma01=gamma01, gamma10=gamma10)


@dataclass
class PosteriorSamples:
    """Retained draws from one or more chains, with labels and diagnostics."""

    chains: list
    parameter_names: tuple
    spec: ModelSpec
    n_times: int
    n_locations: int
    acceptance_rates: dict
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        dim = len(self.parameter_names)
        for draws in self.chains:
            if draws.ndim != 2 or draws.shape[1] != dim:
                raise ValueError("chain draw matrix does not match parameter names")

    @property
    def layout(self) -> ParameterLayout:
        return ParameterLayout.for_spec(self.spec, self.n_times, self.n_locations)

    @property
    def n_draws(self) -> int:
        return sum(c.shape[0] for c in self.chains)

    def stacked(self) -> np.ndarray:
        return np.vstack(self.chains)

    def parameters_at(self, index: int) -> Parameters:
        return self.layout.unpack(self.stacked()[index])

    def column(self, name: str) -> np.ndarray:
        return self.stacked()[:, self.parameter_names.index(name)]

    def credible_interval(self, name: str, level: float = 0.95) -> tuple:
        x = self.column(name)
        half = (1.0 - level) / 2.0
        return (float(np.quantile(x, half)), float(np.quantile(x, 1.0 - half)))


# ---------------------------------------------------------------------------
# adaptive proposals
# ---------------------------------------------------------------------------

class ScalarAdapter:
    """Robbins-Monro step-size adaptation toward a target acceptance rate."""

    def __init__(self, initial_sd: float = 0.5, target: float = SCALAR_ACCEPT_TARGET,
                 decay: float = 0.66):
        self.log_sd = float(np.log(initial_sd))
        self.target = target
        self.decay = decay
        self.count = 0
        self.frozen = False
        self.proposals = 0
        self.accepts = 0

    @property
    def sd(self) -> float:
        return float(np.exp(self.log_sd))

    def observe(self, accepted: bool):
        self.proposals += 1
        self.accepts += int(accepted)
        if self.frozen:
            return
        self.count += 1
        step = self.count ** (-self.decay)
        self.log_sd += step * ((1.0 if accepted else 0.0) - self.target)

    def freeze(self):
        self.frozen = True

    @property
    def acceptance_rate(self) -> float:
        return self.accepts / self.proposals if self.proposals else 0.0

    def state_bytes(self) -> bytes:
        return np.float64(self.log_sd).tobytes()


class CovAdapter:
    """Robust shape adaptation for joint random-walk proposals: a Cholesky
    factor is stretched or shrunk along each proposal direction depending
    on whether the realized acceptance probability was above or below the
    target, with diminishing step sizes."""

    def __init__(self, dim: int, initial_scale: float = 0.1, target: float = 0.234,
                 decay: float = 0.66):
        self.dim = dim
        self.chol = initial_scale * np.eye(dim)
        self.target = target
        self.decay = decay
        self.count = 0
        self.frozen = False
        self.proposals = 0
        self.accepts = 0

    def propose(self, rng) -> tuple:
        z = rng.standard_normal(self.dim)
        return self.chol @ z, z

    def observe(self, z: np.ndarray, alpha: float, accepted: bool):
        self.proposals += 1
        self.accepts += int(accepted)
        if self.frozen:
            return
        self.count += 1
        step = min(0.9, self.dim * self.count ** (-self.decay))
        norm2 = float(z @ z)
        if norm2 <= 0:
            return
        u = (self.chol @ z) / np.sqrt(norm2)
        shape = self.chol @ self.chol.T + step * (alpha - self.target) * np.outer(u, u)
        self.chol = dense_cholesky(shape, lower=True)

    def freeze(self):
        self.frozen = True

    @property
    def acceptance_rate(self) -> float:
        return self.accepts / self.proposals if self.proposals else 0.0

    def state_bytes(self) -> bytes:
        return self.chol.tobytes()


def _adapter_digest(adapters: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(adapters):
        h.update(name.encode())
        h.update(adapters[name].state_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# elementary updates
# ---------------------------------------------------------------------------

def gibbs_precision(quadratic_form: float, rank: int, prior: GammaPrior, rng) -> float:
    """Draw a precision from its Gamma full conditional
    Gamma(shape + rank/2, rate + quadratic_form/2)."""
    if quadratic_form < -1e-9:
        raise ValueError("negative quadratic form")
    if rank < 1:
        raise ValueError("rank must be >= 1")
    quadratic_form = max(quadratic_form, 0.0)
    shape = prior.shape + 0.5 * rank
    rate = prior.rate + 0.5 * quadratic_form
    return float(rng.gamma(shape, 1.0 / rate))


def _transform_forward(value: float, transform) -> float:
    if transform == "log":
        return float(np.log(value))
    if transform == "logit":
        return float(np.log(value) - np.log1p(-value))
    if transform in (None, "identity"):
        return float(value)
    raise ValueError(f"unknown transform {transform!r}")


def _transform_inverse(phi: float, transform) -> float:
    if transform == "log":
        return float(np.exp(phi))
    if transform == "logit":
        return float(expit(phi))
    return float(phi)


def _log_jacobian(value: float, transform) -> float:
    # log |d value / d phi| of the inverse transform, at the value
    if transform == "log":
        return float(np.log(value)) if value > 0 else -np.inf
    if transform == "logit":
        if not 0.0 < value < 1.0:
            return -np.inf
        return float(np.log(value) + np.log1p(-value))
    return 0.0


def _mh_scalar(current, log_target, proposal_sd, transform, rng,
               current_log_target=None):
    """Random-walk Metropolis on a transformed scale with the Jacobian
    correction.  Returns (value, accepted, log_target_at_value)."""
    lt_cur = log_target(current) if current_log_target is None else current_log_target
    if not np.isfinite(lt_cur):
        raise ValueError("non-finite log target at the current state")
    phi = _transform_forward(current, transform)
    cand = _transform_inverse(phi + proposal_sd * rng.standard_normal(), transform)
    jac = _log_jacobian(cand, transform) - _log_jacobian(current, transform)
    lt_cand = log_target(cand) if np.isfinite(jac) else -np.inf
    log_ratio = lt_cand - lt_cur + jac
    if np.log(rng.random()) < log_ratio:
        return cand, True, lt_cand
    return current, False, lt_cur


def mh_update_scalar(current, log_target, proposal_sd, transform, rng):
    """Single Metropolis move for one scalar coordinate (logit scale for
    probabilities, log scale for positive coefficients)."""
    value, accepted, _ = _mh_scalar(current, log_target, proposal_sd, transform, rng)
    return value, accepted


def _mh_vector(current, log_target, proposal_sd, rng, current_log_target=None):
    """Symmetric joint random-walk move on an unconstrained vector."""
    lt_cur = log_target(current) if current_log_target is None else current_log_target
    if not np.isfinite(lt_cur):
        raise ValueError("non-finite log target at the current state")
    cand = current + proposal_sd * rng.standard_normal(current.shape)
    lt_cand = log_target(cand)
    if np.log(rng.random()) < lt_cand - lt_cur:
        return cand, True, lt_cand
    return current, False, lt_cur


def _constrained_block(current, log_target, proposal: CovAdapter, rng,
                       current_log_target=None):
    """Joint move of the free coordinates of a sum-to-zero vector; the last
    component absorbs the move so the constraint holds exactly."""
    if abs(float(np.sum(current))) > 1e-6:
        raise ValueError("input vector violates the sum-to-zero constraint")
    lt_cur = log_target(current) if current_log_target is None else current_log_target
    if not np.isfinite(lt_cur):
        raise ValueError("non-finite log target at the current state")
    increment, z = proposal.propose(rng)
    free = current[:-1] + increment
    cand = np.append(free, -free.sum())
    lt_cand = log_target(cand)
    log_ratio = lt_cand - lt_cur
    alpha = float(np.exp(min(0.0, log_ratio)))
    accepted = np.log(rng.random()) < log_ratio
    proposal.observe(z, alpha, accepted)
    if accepted:
        return cand, True, lt_cand
    return current, False, lt_cur


def update_constrained_block(current, log_target, proposal: CovAdapter, rng):
    """Adaptive joint update of a constrained component vector."""
    vec, _, _ = _constrained_block(current, log_target, proposal, rng)
    return vec


# ---------------------------------------------------------------------------
# trend block updates (conditional prior proposals)
# ---------------------------------------------------------------------------

def trend_block_conditional(structure_entries: np.ndarray, kappa: float,
                            current: np.ndarray, block: np.ndarray):
    """Gaussian prior conditional of a trend block given the remainder:
    returns (mean, lower Cholesky factor of the block precision)."""
    block = np.asarray(block)
    rest = np.setdiff1d(np.arange(len(current)), block)
    r_bb = structure_entries[np.ix_(block, block)]
    r_br = structure_entries[np.ix_(block, rest)]
    try:
        chol_prec = dense_cholesky(kappa * r_bb, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular block precision") from exc
    rhs = -(r_br @ current[rest])
    # mean solves R_bb mean = rhs (kappa cancels)
    tmp = solve_triangular(chol_prec, kappa * rhs, lower=True)
    mean = solve_triangular(chol_prec.T, tmp, lower=False)
    return mean, chol_prec


def _partition_blocks(n: int, block_size: int, rng) -> list:
    """Contiguous blocks covering range(n) with a random boundary offset;
    every block leaves at least two points fixed so the conditional prior
    is proper."""
    block_size = min(block_size, max(1, n - 2))
    offset = int(rng.integers(0, block_size)) if block_size > 1 else 0
    bounds = [0] + list(range(offset if offset else block_size, n, block_size)) + [n]
    bounds = sorted(set(b for b in bounds if 0 <= b <= n))
    blocks = [np.arange(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(blocks) == 1 and n >= 2:  # complement would be empty
        half = n // 2
        blocks = [np.arange(0, half), np.arange(half, n)]
    return blocks


def _update_trend_blocks(current, block_size, kappa, log_likelihood_fn, rng,
                         current_loglik=None, blocks=None, structure_entries=None):
    """Sweep conditional-prior proposals over trend blocks.  Prior terms
    cancel against the proposal, so each block accepts on the likelihood
    ratio alone.  Returns (trend, loglik, n_accepted, n_blocks)."""
    r = np.array(current, dtype=float)
    n = len(r)
    if not 1 <= block_size <= n:
        raise ValueError("block size must lie in [1, T]")
    if structure_entries is None:
        structure_entries = structure_matrix_rw2(n).entries
    if blocks is None:
        blocks = _partition_blocks(n, block_size, rng)
    ll_cur = log_likelihood_fn(r) if current_loglik is None else current_loglik
    accepted = 0
    for block in blocks:
        mean, chol_prec = trend_block_conditional(structure_entries, kappa, r, block)
        z = rng.standard_normal(len(block))
        cand_block = mean + solve_triangular(chol_prec.T, z, lower=False)
        cand = r.copy()
        cand[block] = cand_block
        ll_cand = log_likelihood_fn(cand)
        if np.log(rng.random()) < ll_cand - ll_cur:
            r, ll_cur = cand, ll_cand
            accepted += 1
    return r, ll_cur, accepted, len(blocks)


def update_trend_blocks(current, block_size, kappa, log_likelihood_fn, rng,
                        blocks=None):
    """Blockwise trend update with conditional prior proposals."""
    r, _, _, _ = _update_trend_blocks(current, block_size, kappa,
                                      log_likelihood_fn, rng, blocks=blocks)
    return r


# ---------------------------------------------------------------------------
# convergence diagnostics
# ---------------------------------------------------------------------------

class RhatResult(NamedTuple):
    per_parameter: np.ndarray
    max_value: float
    degenerate: np.ndarray


def _basic_split_rhat(seqs: np.ndarray) -> float:
    n = seqs.shape[1]
    within = seqs.var(axis=1, ddof=1).mean()
    between = n * seqs.mean(axis=1).var(ddof=1)
    if within <= 0:
        return 1.0 if between <= 1e-300 else np.inf
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def _rank_normalize(seqs: np.ndarray) -> np.ndarray:
    flat = rankdata(seqs, method="average", axis=None)
    total = seqs.size
    z = ndtri((flat - 0.375) / (total + 0.25))
    return z.reshape(seqs.shape)


def rhat(chains) -> RhatResult:
    """Rank-normalized split potential scale reduction, taking the larger
    of the bulk and folded (median-absolute-deviation) statistics.
    Constant-everywhere parameters are reported as 1 with a degeneracy flag.
    """
    if len(chains) < 2:
        raise ValueError("need at least 2 chains")
    lengths = {c.shape[0] for c in chains}
    if len(lengths) != 1:
        raise ValueError("chains must have equal retained lengths")
    n = lengths.pop()
    if n < 4:
        raise ValueError("need at least 4 retained draws per chain")
    half = n // 2
    split = []
    for c in chains:
        split.append(c[:half])
        split.append(c[half:2 * half])
    stacked = np.stack(split)  # (2m, half, dim)
    dim = stacked.shape[2]
    values = np.empty(dim)
    degenerate = np.zeros(dim, dtype=bool)
    for j in range(dim):
        x = stacked[:, :, j]
        if np.ptp(x) == 0:
            values[j] = 1.0
            degenerate[j] = True
            continue
        bulk = _basic_split_rhat(_rank_normalize(x))
        folded = _basic_split_rhat(_rank_normalize(np.abs(x - np.median(x))))
        values[j] = max(bulk, folded)
    return RhatResult(per_parameter=values, max_value=float(values.max()),
                      degenerate=degenerate)


# ---------------------------------------------------------------------------
# full chains
# ---------------------------------------------------------------------------

def default_init(data, spec: ModelSpec,
                 hyper: Hyperpriors = DEFAULT_HYPERPRIORS) -> Parameters:
    """Deterministic start: trend at the global log rate, seasonal at the
    centered empirical monthly log-rate profile (a zero seasonal start can
    funnel the chain into a mode where the trend absorbs the seasonality),
    spatial at zero, precisions at their prior means, transitions at
    (0.1, 0.2), coefficients at the prior mean 1."""
    observed = ~data.missing
    total_y = float(data.counts[observed].sum())
    total_e = float(data.populations[observed].sum())
    rate = total_y / total_e if total_y > 0 else (total_y + 0.5) / total_e

    cycle = np.arange(data.n_times) % spec.cycle_length
    seasonal = np.zeros(spec.cycle_length)
    for c in range(spec.cycle_length):
        cells = observed & (cycle[None, :] == c)
        y_c = float(data.counts[cells].sum())
        e_c = float(data.populations[cells].sum())
        seasonal[c] = np.log((y_c + 0.5) / e_c) - np.log(rate) if e_c > 0 else 0.0
    seasonal -= seasonal.mean()

    p = spec.covariate_dim
    return Parameters(
        trend=np.full(data.n_times, np.log(rate)),
        seasonal=seasonal,
        spatial=np.zeros(data.n_locations),
        kappa_trend=hyper.kappa_trend_prior.shape / hyper.kappa_trend_prior.rate,
        kappa_seasonal=hyper.kappa_seasonal_prior.shape / hyper.kappa_seasonal_prior.rate,
        kappa_spatial=hyper.kappa_spatial_prior.shape / hyper.kappa_spatial_prior.rate,
        beta=np.ones(p),
        gamma01=0.1 if p else 0.5,
        gamma10=0.2 if p else 0.5,
    )


def run_chain(data, spec: ModelSpec, config: SamplerConfig,
              init: Optional[Parameters] = None,
              hyper: Hyperpriors = DEFAULT_HYPERPRIORS, chain_index: int = 0):
    """One chain of the blocked sampler.  Returns (draws, acceptance_rates,
    diagnostics); draws exclude warmup and honor thinning."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, chain_index]))
    params = (default_init(data, spec, hyper) if init is None else init).copy()
    params.validate(spec)

    ws = LikelihoodWorkspace(data, spec)
    layout = ParameterLayout.for_spec(spec, data.n_times, data.n_locations)
    trend_structure = structure_matrix_rw2(data.n_times)
    seasonal_structure = structure_matrix_crw1(spec.cycle_length)
    spatial_structure = structure_matrix_spatial(data.adjacency)
    rank_trend = data.n_times - trend_structure.rank_deficiency
    rank_seasonal = spec.cycle_length - seasonal_structure.rank_deficiency
    rank_spatial = data.n_locations - spatial_structure.rank_deficiency
    r_trend = trend_structure.entries
    r_seasonal = seasonal_structure.entries
    r_spatial = spatial_structure.entries
    p = spec.covariate_dim

    cur_ll = ws.total_loglik(params)
    lp = log_prior(params, spec, trend_structure, seasonal_structure,
                   spatial_structure, hyper)
    if not (np.isfinite(cur_ll) and np.isfinite(lp)):
        raise ValueError("non-finite posterior at the initial state")

    decay = config.adapt_rate_decay
    trend_block_size = min(config.trend_block_size, data.n_times)
    update_spatial = data.n_locations >= 2
    # initial joint-proposal scales matched to the prior precision magnitudes
    seasonal_scale = 1.0 / np.sqrt(2.0 * max(params.kappa_seasonal, 1.0))
    spatial_scale = 1.0 / np.sqrt(2.0 * max(params.kappa_spatial, 1.0))
    adapters = {
        "seasonal": CovAdapter(spec.cycle_length - 1, initial_scale=seasonal_scale,
                               target=config.adapt_target, decay=decay),
        "trend_refresh": ScalarAdapter(0.02, target=config.adapt_target, decay=decay),
        "trend_level": ScalarAdapter(0.05, decay=decay),
        "trend_slope": ScalarAdapter(0.05, decay=decay),
    }
    if update_spatial:
        adapters["spatial"] = CovAdapter(data.n_locations - 1, initial_scale=spatial_scale,
                                         target=config.adapt_target, decay=decay)
    # the RW2 prior is flat along these two directions, so moves along them
    # accept on the likelihood ratio alone
    level_direction = np.ones(data.n_times)
    slope_direction = (np.arange(data.n_times) - (data.n_times - 1) / 2.0) / data.n_times
    if p:
        adapters["gamma01"] = ScalarAdapter(0.5, decay=decay)
        adapters["gamma10"] = ScalarAdapter(0.5, decay=decay)
        for j in range(p):
            adapters[f"beta_{j + 1}"] = ScalarAdapter(0.3, decay=decay)
    trend_accepts = trend_proposals = 0

    n_kept = (config.n_iterations - config.n_warmup + config.thin - 1) // config.thin
    draws = np.empty((n_kept, layout.dim))
    kept = 0
    digest_at_freeze = None
    pending_ll = np.nan  # loglik of the last evaluated proposal

    def target_gamma(name):
        def fn(g):
            nonlocal pending_ll
            old = getattr(params, name)
            setattr(params, name, g)
            pending_ll = ws.total_loglik(params)
            setattr(params, name, old)
            return pending_ll + beta_logpdf(g, hyper.gamma_prior)
        return fn

    def target_beta(j):
        def fn(b):
            nonlocal pending_ll
            old = params.beta[j]
            params.beta[j] = b
            pending_ll = ws.total_loglik(params)
            params.beta[j] = old
            return pending_ll + gamma_logpdf(b, hyper.beta_prior)
        return fn

    def target_seasonal(vec):
        nonlocal pending_ll
        old = params.seasonal
        params.seasonal = vec
        pending_ll = ws.total_loglik(params)
        params.seasonal = old
        return pending_ll - 0.5 * params.kappa_seasonal * float(vec @ r_seasonal @ vec)

    def target_spatial(vec):
        nonlocal pending_ll
        old = params.spatial
        params.spatial = vec
        pending_ll = ws.total_loglik(params)
        params.spatial = old
        return pending_ll - 0.5 * params.kappa_spatial * float(vec @ r_spatial @ vec)

    def loglik_of_trend(vec):
        old = params.trend
        params.trend = vec
        out = ws.total_loglik(params)
        params.trend = old
        return out

    def target_trend(vec):
        nonlocal pending_ll
        pending_ll = loglik_of_trend(vec)
        return pending_ll - 0.5 * params.kappa_trend * float(vec @ r_trend @ vec)

    for it in range(config.n_iterations):
        if it == config.n_warmup:
            for a in adapters.values():
                a.freeze()
            digest_at_freeze = _adapter_digest(adapters)

        # precisions: closed-form Gamma full conditionals
        params.kappa_trend = gibbs_precision(
            float(params.trend @ r_trend @ params.trend), rank_trend,
            hyper.kappa_trend_prior, rng)
        params.kappa_seasonal = gibbs_precision(
            float(params.seasonal @ r_seasonal @ params.seasonal), rank_seasonal,
            hyper.kappa_seasonal_prior, rng)
        if rank_spatial >= 1:  # an edgeless graph leaves kappa_spatial at its prior
            params.kappa_spatial = gibbs_precision(
                float(params.spatial @ r_spatial @ params.spatial), rank_spatial,
                hyper.kappa_spatial_prior, rng)

        # transition probabilities and outbreak coefficients
        if p:
            for name in ("gamma01", "gamma10"):
                ad = adapters[name]
                cur_target = cur_ll + beta_logpdf(getattr(params, name), hyper.gamma_prior)
                val, acc, _ = _mh_scalar(getattr(params, name), target_gamma(name),
                                         ad.sd, "logit", rng, cur_target)
                if acc:
                    setattr(params, name, val)
                    cur_ll = pending_ll
                ad.observe(acc)
            for j in range(p):
                ad = adapters[f"beta_{j + 1}"]
                cur_target = cur_ll + gamma_logpdf(params.beta[j], hyper.beta_prior)
                val, acc, _ = _mh_scalar(params.beta[j], target_beta(j),
                                         ad.sd, "log", rng, cur_target)
                if acc:
                    params.beta[j] = val
                    cur_ll = pending_ll
                ad.observe(acc)

        # seasonal and spatial joint constrained moves (repeated: these
        # blocks dominate the autocorrelation time)
        for _ in range(3):
            cur_target = cur_ll - 0.5 * params.kappa_seasonal * float(
                params.seasonal @ r_seasonal @ params.seasonal)
            vec, acc, _ = _constrained_block(params.seasonal, target_seasonal,
                                             adapters["seasonal"], rng, cur_target)
            if acc:
                params.seasonal = vec
                cur_ll = pending_ll

        if update_spatial:
            for _ in range(2):
                cur_target = cur_ll - 0.5 * params.kappa_spatial * float(
                    params.spatial @ r_spatial @ params.spatial)
                vec, acc, _ = _constrained_block(params.spatial, target_spatial,
                                                 adapters["spatial"], rng, cur_target)
                if acc:
                    params.spatial = vec
                    cur_ll = pending_ll

        # trend: conditional-prior blocks, then a global adaptive refresh
        params.trend, cur_ll, n_acc, n_blk = _update_trend_blocks(
            params.trend, trend_block_size, params.kappa_trend,
            loglik_of_trend, rng, current_loglik=cur_ll,
            structure_entries=r_trend)
        trend_accepts += n_acc
        trend_proposals += n_blk

        ad = adapters["trend_refresh"]
        cur_target = cur_ll - 0.5 * params.kappa_trend * float(
            params.trend @ r_trend @ params.trend)
        vec, acc, _ = _mh_vector(params.trend, target_trend, ad.sd, rng, cur_target)
        if acc:
            params.trend = vec
            cur_ll = pending_ll
        ad.observe(acc)

        # flat-direction moves: whole-trend level and slope shifts
        for name, direction in (("trend_level", level_direction),
                                ("trend_slope", slope_direction)):
            ad = adapters[name]
            cand = params.trend + ad.sd * rng.standard_normal() * direction
            ll_cand = loglik_of_trend(cand)
            acc = np.log(rng.random()) < ll_cand - cur_ll
            if acc:
                params.trend = cand
                cur_ll = ll_cand
            ad.observe(acc)

        # suppress floating-point drift off the constraint surface
        if (it + 1) % config.recenter_every == 0:
            params.seasonal = params.seasonal - params.seasonal.mean()
            params.spatial = params.spatial - params.spatial.mean()
            cur_ll = ws.total_loglik(params)

        if it >= config.n_warmup and (it - config.n_warmup) % config.thin == 0:
            draws[kept] = layout.pack(params)
            kept += 1

    acceptance = {name: ad.acceptance_rate for name, ad in adapters.items()}
    acceptance["trend_blocks"] = trend_accepts / trend_proposals if trend_proposals else 0.0
    diagnostics = {
        "chain_index": chain_index,
        "adapter_digest_at_freeze": digest_at_freeze,
        "adapter_digest_final": _adapter_digest(adapters),
    }
    return draws[:kept], acceptance, diagnostics


def _run_chain_job(args):
    data, spec, config, init, hyper, chain_index = args
    return run_chain(data, spec, config, init, hyper, chain_index)


def run_mcmc(data, spec: ModelSpec, config: SamplerConfig,
             init: Optional[Parameters] = None,
             hyper: Hyperpriors = DEFAULT_HYPERPRIORS,
             n_jobs: int = 1) -> PosteriorSamples:
    """Run all chains and assemble labeled posterior draws with acceptance
    rates and (for >= 2 chains) the convergence table."""
    jobs = [(data, spec, config, init, hyper, k) for k in range(config.n_chains)]
    if n_jobs > 1 and config.n_chains > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(n_jobs, config.n_chains)) as pool:
            results = list(pool.map(_run_chain_job, jobs))
    else:
        results = [_run_chain_job(j) for j in jobs]

    chains = [r[0] for r in results]
    layout = ParameterLayout.for_spec(spec, data.n_times, data.n_locations)
    names = tuple(layout.names())
    acceptance = {}
    for key in results[0][1]:
        acceptance[key] = float(np.mean([r[1][key] for r in results]))
    diagnostics = {
        "per_chain": [r[2] for r in results],
        "per_chain_acceptance": [r[1] for r in results],
        "config": config.to_config(),
    }
    if config.n_chains >= 2:
        result = rhat(chains)
        diagnostics["rhat"] = result.per_parameter.tolist()
        diagnostics["rhat_max"] = result.max_value
        diagnostics["rhat_degenerate"] = result.degenerate.tolist()
    return PosteriorSamples(chains=chains, parameter_names=names, spec=spec,
                            n_times=data.n_times, n_locations=data.n_locations,
                            acceptance_rates=acceptance, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_samples(out_dir, samples: PosteriorSamples) -> list:
    """Write one labeled CSV per chain plus a JSON metadata file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, draws in enumerate(samples.chains):
        name = f"chain_{k + 1:02d}.csv"
        frame = pd.DataFrame(draws, columns=list(samples.parameter_names))
        frame.to_csv(out / name, index=False)
        written.append(name)
    meta = {
        "variant": samples.spec.variant,
        "cycle_length": samples.spec.cycle_length,
        "n_times": samples.n_times,
        "n_locations": samples.n_locations,
        "parameter_names": list(samples.parameter_names),
        "acceptance_rates": samples.acceptance_rates,
        "diagnostics": samples.diagnostics,
    }
    (out / "samples_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    written.append("samples_meta.json")
    return written


def load_samples(fit_dir) -> PosteriorSamples:
    fit = Path(fit_dir)
    meta = json.loads((fit / "samples_meta.json").read_text())
    chains = []
    for path in sorted(fit.glob("chain_*.csv")):
        frame = pd.read_csv(path)
        if list(frame.columns) != meta["parameter_names"]:
            raise ValueError(f"{path}: columns do not match metadata")
        chains.append(frame.to_numpy(dtype=float))
    if not chains:
        raise ValueError(f"no chain CSVs found in {fit_dir}")
    return PosteriorSamples(
        chains=chains, parameter_names=tuple(meta["parameter_names"]),
        spec=ModelSpec(variant=meta["variant"], cycle_length=meta["cycle_length"]),
        n_times=meta["n_times"], n_locations=meta["n_locations"],
        acceptance_rates=meta["acceptance_rates"], diagnostics=meta["diagnostics"])
