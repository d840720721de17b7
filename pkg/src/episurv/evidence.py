"""Marginal likelihood estimation and Bayesian model comparison.

The evidence integral is estimated by importance sampling with a
heavy-tailed multivariate t proposal (3 degrees of freedom) fitted to the
posterior draws: location = sample mean, scale = sample covariance.  The
proposal lives in an unconstrained coordinate system (log precisions and
coefficients, logit transition probabilities, free coordinates of the
constrained fields) so its support matches the prior's; the exact
log-Jacobians of the mapping enter the weights.

Log evidences share one fixed convention for the improper flat directions
of the trend prior (constant 0) and for the 2*pi factors of the
random-field priors, so differences between models fitted to the same data
are meaningful Bayes factors; the Beta/Gamma factors that only exist in
outbreak variants are fully normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import multivariate_t

from .data import structure_matrix_crw1, structure_matrix_rw2, structure_matrix_spatial
from .hmm import LikelihoodWorkspace
from .model import DEFAULT_HYPERPRIORS, Hyperpriors, ModelSpec, log_prior
from .sampler import ParameterLayout, PosteriorSamples

PROPOSAL_DF = 3.0
SCALE_REGULARIZATION = 1e-8


@dataclass(frozen=True)
class EvidenceEstimate:
    """Log marginal likelihood with its Monte Carlo uncertainty."""

    log_marginal: float
    mc_standard_error: float
    n_samples: int
    effective_sample_size: float

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.effective_sample_size > self.n_samples + 1e-9:
            raise ValueError("effective sample size cannot exceed n_samples")


@dataclass(frozen=True)
class TProposal:
    """Multivariate t importance density with rvs/logpdf."""

    location: np.ndarray
    scale: np.ndarray
    df: float = PROPOSAL_DF

    def __post_init__(self):
        try:
            np.linalg.cholesky(self.scale)
        except np.linalg.LinAlgError as exc:
            raise ValueError("proposal scale matrix is not positive definite") from exc

    @property
    def dim(self) -> int:
        return len(self.location)

    def _frozen(self):
        return multivariate_t(loc=self.location, shape=self.scale, df=self.df)

    def rvs(self, n: int, rng) -> np.ndarray:
        draws = self._frozen().rvs(size=n, random_state=rng)
        return np.atleast_2d(np.asarray(draws, dtype=float)).reshape(n, self.dim)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.atleast_1d(self._frozen().logpdf(x))


# ---------------------------------------------------------------------------
# unconstrained coordinates
# ---------------------------------------------------------------------------

def _logit(x):
    return np.log(x) - np.log1p(-x)


def to_unconstrained(draws: np.ndarray, layout: ParameterLayout) -> np.ndarray:
    """Map draw rows to unconstrained coordinates: trend kept as is, last
    seasonal/spatial coordinate dropped (it is determined by the
    constraint), log precisions and coefficients, logit transitions."""
    draws = np.atleast_2d(draws)
    parts = [
        draws[:, layout.trend],
        draws[:, layout.seasonal][:, :-1],
        draws[:, layout.spatial][:, :-1],
        np.log(draws[:, layout.kappas]),
    ]
    if layout.covariate_dim:
        parts.append(np.log(draws[:, layout.beta]))
        parts.append(_logit(draws[:, layout.gammas]))
    return np.concatenate(parts, axis=1)


def from_unconstrained(phi: np.ndarray, layout: ParameterLayout):
    """Inverse of :func:`to_unconstrained`; also returns the log-Jacobian
    log |d theta / d phi| per row."""
    phi = np.atleast_2d(phi)
    n = phi.shape[0]
    out = np.empty((n, layout.dim))
    pos = 0

    width = layout.n_times
    out[:, layout.trend] = phi[:, pos:pos + width]
    pos += width

    width = layout.cycle_length - 1
    free = phi[:, pos:pos + width]
    out[:, layout.seasonal] = np.concatenate([free, -free.sum(axis=1, keepdims=True)], axis=1)
    pos += width

    width = layout.n_locations - 1
    free = phi[:, pos:pos + width]
    out[:, layout.spatial] = np.concatenate([free, -free.sum(axis=1, keepdims=True)], axis=1)
    pos += width

    log_jac = np.zeros(n)
    kappas = phi[:, pos:pos + 3]
    out[:, layout.kappas] = np.exp(kappas)
    log_jac += kappas.sum(axis=1)
    pos += 3

    if layout.covariate_dim:
        width = layout.covariate_dim
        logbeta = phi[:, pos:pos + width]
        out[:, layout.beta] = np.exp(logbeta)
        log_jac += logbeta.sum(axis=1)
        pos += width
        gam_phi = phi[:, pos:pos + 2]
        gam = expit(gam_phi)
        out[:, layout.gammas] = gam
        with np.errstate(divide="ignore"):
            log_jac += (np.log(gam) + np.log1p(-gam)).sum(axis=1)
        pos += 2
    return out, log_jac


def fit_proposal(samples: PosteriorSamples) -> TProposal:
    """Fit the t proposal to the posterior draws in unconstrained coordinates."""
    layout = samples.layout
    phi = to_unconstrained(samples.stacked(), layout)
    n, d = phi.shape
    if n < 10 * d:
        raise ValueError(
            f"need at least 10x the parameter dimension in draws ({10 * d}), got {n}")
    location = phi.mean(axis=0)
    scale = np.cov(phi, rowvar=False) + SCALE_REGULARIZATION * np.eye(d)
    return TProposal(location=location, scale=scale)


# ---------------------------------------------------------------------------
# importance sampling
# ---------------------------------------------------------------------------

def importance_sample(log_target_fn, proposal, n_samples: int, rng) -> EvidenceEstimate:
    """Estimate log integral of exp(log_target) with draws from ``proposal``.

    ``log_target_fn`` maps a (N, d) batch to per-row joint log densities
    (likelihood + prior + mapping Jacobians); non-finite rows get weight 0.
    The reported standard error is the delta-method error of the log
    estimate; the effective sample size is (sum w)^2 / sum w^2.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    phi = proposal.rvs(n_samples, rng)
    log_w = np.asarray(log_target_fn(phi), dtype=float) - proposal.logpdf(phi)
    log_w = np.where(np.isfinite(log_w), log_w, -np.inf)
    if not np.any(np.isfinite(log_w)):
        raise RuntimeError("all importance weights are zero; the proposal "
                           "does not overlap the posterior")
    log_mean = float(logsumexp(log_w) - np.log(n_samples))
    centered = log_w - log_mean
    second_moment = float(np.exp(logsumexp(2.0 * centered) - np.log(n_samples)))
    rel_var = max(second_moment - 1.0, 0.0)
    se = float(np.sqrt(rel_var / n_samples))
    ess = float(np.exp(2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)))
    return EvidenceEstimate(log_marginal=log_mean, mc_standard_error=se,
                            n_samples=n_samples,
                            effective_sample_size=min(ess, float(n_samples)))


def log_marginal_likelihood(data, spec: ModelSpec, samples: PosteriorSamples,
                            n_samples: int = 10_000, rng=None,
                            hyper: Hyperpriors = DEFAULT_HYPERPRIORS,
                            proposal: TProposal = None) -> EvidenceEstimate:
    """Importance-sampling estimate of log P(data | model)."""
    rng = np.random.default_rng(rng)
    layout = samples.layout
    if proposal is None:
        proposal = fit_proposal(samples)
    ws = LikelihoodWorkspace(data, spec)
    trend_structure = structure_matrix_rw2(data.n_times)
    seasonal_structure = structure_matrix_crw1(spec.cycle_length)
    spatial_structure = structure_matrix_spatial(data.adjacency)

    def log_target(phi):
        rows, log_jac = from_unconstrained(phi, layout)
        out = np.empty(rows.shape[0])
        for idx in range(rows.shape[0]):
            params = layout.unpack(rows[idx])
            lp = log_prior(params, spec, trend_structure, seasonal_structure,
                           spatial_structure, hyper)
            if not np.isfinite(lp):
                out[idx] = -np.inf
                continue
            out[idx] = ws.total_loglik(params) + lp + log_jac[idx]
        return out

    return importance_sample(log_target, proposal, n_samples, rng)


def posterior_model_probs(log_evidences, prior_weights=None) -> np.ndarray:
    """Posterior model probabilities: softmax of log evidence plus log
    prior weight, numerically stabilized by max subtraction."""
    log_ev = np.asarray(log_evidences, dtype=float)
    if np.any(~np.isfinite(log_ev)):
        raise ValueError("log evidences must be finite")
    if prior_weights is None:
        weights = np.zeros_like(log_ev)
    else:
        prior = np.asarray(prior_weights, dtype=float)
        if prior.shape != log_ev.shape or np.any(prior <= 0):
            raise ValueError("prior weights must be positive and match evidences")
        weights = np.log(prior)
    scores = log_ev + weights
    scores = scores - scores.max()
    probs = np.exp(scores)
    return probs / probs.sum()
