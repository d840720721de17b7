"""Exact likelihood and outbreak probabilities for the hidden two-state chain.

The hidden outbreak indicators are integrated out with the forward filter,
which turns the 2^T-term path sum into an O(T) recursion; the backward
sweep then yields per-time posterior outbreak probabilities (local
decoding).  Everything runs on scaled probabilities with accumulated log
normalizers, so series with T up to 10^4 and counts up to 10^6 are safe
from under/overflow.  Missing observations contribute a unit emission
factor (missing at random).

Brute-force path-enumeration oracles are included for desk-scale
verification of both the likelihood and the smoothed probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from .model import (ModelSpec, Parameters, outbreak_covariates,
                    stationary_distribution, transition_matrix)


@dataclass(frozen=True)
class FilterResult:
    """Forward-filter output for one location: the log likelihood and the
    (T, 2) matrix of log forward values log P(y_{1:t}, x_t)."""

    log_likelihood: float
    log_forward: np.ndarray

    def __post_init__(self):
        final = logsumexp(self.log_forward[-1])
        if np.isfinite(self.log_likelihood) or np.isfinite(final):
            if not np.isclose(final, self.log_likelihood, rtol=1e-9, atol=1e-9):
                raise ValueError("log_likelihood inconsistent with final forward column")


@dataclass(frozen=True)
class SmoothedProbs:
    """Per-time posterior outbreak probabilities P(x_t = 1 | y_{1:T})."""

    prob_outbreak: np.ndarray

    def __post_init__(self):
        p = self.prob_outbreak
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("smoothed probabilities must lie in [0, 1]")


class LikelihoodWorkspace:
    """Precomputed per-dataset arrays for repeated likelihood evaluation.

    Caches the covariates, count terms, and cyclic index so that one
    evaluation only has to assemble emissions and run the forward loop.
    """

    def __init__(self, data, spec: ModelSpec):
        self.data = data
        self.spec = spec
        self.y = np.where(data.missing, 0, data.counts).astype(float)
        self.missing = data.missing
        self.e = data.populations.astype(float)
        self.log_e = np.log(self.e)
        self.y_log_e = self.y * self.log_e
        self.log_y_fact = gammaln(self.y + 1.0)
        self.covariates = outbreak_covariates(spec, data)  # (I, T, p)
        self.cycle_index = np.arange(data.n_times) % spec.cycle_length

    def log_emissions(self, params: Parameters) -> np.ndarray:
        """Log emission matrix (I, T, 2): Poisson log-pmf per hidden state,
        exactly 0 at missing cells."""
        eta0 = (params.trend[None, :]
                + params.seasonal[self.cycle_index][None, :]
                + params.spatial[:, None])
        out = np.empty(self.y.shape + (2,))
        with np.errstate(over="ignore"):
            out[:, :, 0] = (self.y_log_e + self.y * eta0
                            - self.e * np.exp(eta0) - self.log_y_fact)
            if self.spec.covariate_dim:
                eta1 = eta0 + self.covariates @ np.asarray(params.beta, dtype=float)
                out[:, :, 1] = (self.y_log_e + self.y * eta1
                                - self.e * np.exp(eta1) - self.log_y_fact)
            else:
                out[:, :, 1] = out[:, :, 0]
        out[self.missing] = 0.0
        return out

    def total_loglik(self, params: Parameters) -> float:
        gamma = transition_matrix(params.gamma01, params.gamma10)
        delta = stationary_distribution(params.gamma01, params.gamma10)
        ll = forward_loglik_batch(self.log_emissions(params), gamma, delta)
        return float(ll.sum())

    def per_location_loglik(self, params: Parameters) -> np.ndarray:
        gamma = transition_matrix(params.gamma01, params.gamma10)
        delta = stationary_distribution(params.gamma01, params.gamma10)
        return forward_loglik_batch(self.log_emissions(params), gamma, delta)


# ---------------------------------------------------------------------------
# batched recursions on log-emission arrays
# ---------------------------------------------------------------------------

def _scale_emissions(log_em):
    """Per-cell max-normalized linear emissions w = exp(le - m), with the
    row maxima m returned for log-likelihood reconstruction."""
    m = log_em.max(axis=2)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(log_em - safe_m[:, :, None])
    return w, m


def forward_loglik_batch(log_em, gamma, delta) -> np.ndarray:
    """Log likelihood per series (fast path, no forward history).

    ``log_em`` is (B, T, 2); ``gamma`` is (2, 2) or (B, 2, 2); ``delta``
    is (2,) or (B, 2).
    """
    w, m = _scale_emissions(log_em)
    n_series, n_times, _ = log_em.shape
    gamma = np.asarray(gamma, dtype=float)
    batched_gamma = gamma.ndim == 3
    log_c = np.empty((n_times, n_series))
    a = np.atleast_2d(delta) * w[:, 0, :]
    c = a.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(c[:, None] > 0, a / c[:, None], 0.5)
        log_c[0] = np.log(c)
        for t in range(1, n_times):
            if batched_gamma:
                pred = np.einsum("bi,bij->bj", a, gamma)
            else:
                pred = a @ gamma
            b = pred * w[:, t, :]
            c = b.sum(axis=1)
            a = np.where(c[:, None] > 0, b / c[:, None], 0.5)
            log_c[t] = np.log(c)
    return log_c.sum(axis=0) + m.sum(axis=1)


def forward_filter_batch(log_em, gamma, delta):
    """Forward recursion with history: returns (loglik (B,), log_alpha (B, T, 2))."""
    w, m = _scale_emissions(log_em)
    n_series, n_times, _ = log_em.shape
    batched_gamma = np.ndim(gamma) == 3
    a_hist = np.empty((n_series, n_times, 2))
    log_c = np.empty((n_times, n_series))
    a = np.atleast_2d(delta) * w[:, 0, :]
    c = a.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(c[:, None] > 0, a / c[:, None], 0.5)
        log_c[0] = np.log(c)
        a_hist[:, 0, :] = a
        for t in range(1, n_times):
            if batched_gamma:
                pred = np.einsum("bi,bij->bj", a, gamma)
            else:
                pred = a @ gamma
            b = pred * w[:, t, :]
            c = b.sum(axis=1)
            a = np.where(c[:, None] > 0, b / c[:, None], 0.5)
            log_c[t] = np.log(c)
            a_hist[:, t, :] = a
        # log alpha_t = log(scaled a_t) + sum_{tau <= t} (log c_tau + m_tau)
        accum = np.cumsum(log_c.T + m, axis=1)
        log_alpha = np.log(a_hist) + accum[:, :, None]
    loglik = accum[:, -1]
    return loglik, log_alpha


def backward_sweep_batch(log_em, gamma):
    """Backward recursion: returns log_beta (B, T, 2) with log_beta[:, -1] = 0.

    log_beta[:, t] is the log probability of the observations after time t
    given the state at time t.
    """
    w, m = _scale_emissions(log_em)
    n_series, n_times, _ = log_em.shape
    batched_gamma = np.ndim(gamma) == 3
    gamma_t = np.swapaxes(gamma, -1, -2)
    log_beta = np.empty((n_series, n_times, 2))
    log_beta[:, -1, :] = 0.0
    b = np.ones((n_series, 2))
    accum = np.zeros(n_series)
    with np.errstate(divide="ignore", invalid="ignore"):
        for t in range(n_times - 1, 0, -1):
            weighted = b * w[:, t, :]
            if batched_gamma:
                nxt = np.einsum("bi,bij->bj", weighted, gamma_t)
            else:
                nxt = weighted @ gamma_t
            scale = nxt.max(axis=1)
            b = np.where(scale[:, None] > 0, nxt / scale[:, None], 0.0)
            accum = accum + np.log(scale) + m[:, t]
            log_beta[:, t - 1, :] = np.log(b) + accum[:, None]
    return log_beta


def smoothed_probs_batch(log_em, gamma, delta) -> np.ndarray:
    """Posterior outbreak probabilities (B, T) by combining both sweeps."""
    _, log_alpha = forward_filter_batch(log_em, gamma, delta)
    log_beta = backward_sweep_batch(log_em, gamma)
    joint = log_alpha + log_beta
    # normalize per time point: the two states always sum to one
    norm = logsumexp(joint, axis=2)
    with np.errstate(invalid="ignore"):
        probs = np.exp(joint[:, :, 1] - norm)
    return np.where(np.isfinite(norm), probs, 0.5)


# ---------------------------------------------------------------------------
# public per-location operations
# ---------------------------------------------------------------------------

def forward_loglik(data, spec: ModelSpec, params: Parameters, i: int) -> FilterResult:
    """Exact log likelihood of location i with outbreak states summed out.

    An all-missing series has likelihood 1 (log likelihood 0).
    """
    ws = LikelihoodWorkspace(data, spec)
    gamma = transition_matrix(params.gamma01, params.gamma10)
    delta = stationary_distribution(params.gamma01, params.gamma10)
    log_em = ws.log_emissions(params)[i:i + 1]
    loglik, log_alpha = forward_filter_batch(log_em, gamma, delta)
    return FilterResult(log_likelihood=float(loglik[0]), log_forward=log_alpha[0])


def total_loglik(data, spec: ModelSpec, params: Parameters) -> float:
    """Joint log likelihood: sum of the per-location filters."""
    return LikelihoodWorkspace(data, spec).total_loglik(params)


def smoothed_outbreak_probs(data, spec: ModelSpec, params: Parameters,
                            i: int) -> SmoothedProbs:
    """P(x_t = 1 | all observations at location i) for each t."""
    ws = LikelihoodWorkspace(data, spec)
    gamma = transition_matrix(params.gamma01, params.gamma10)
    delta = stationary_distribution(params.gamma01, params.gamma10)
    probs = smoothed_probs_batch(ws.log_emissions(params)[i:i + 1], gamma, delta)
    return SmoothedProbs(prob_outbreak=probs[0])


def smoothed_probability_matrix(data, spec: ModelSpec, params: Parameters) -> np.ndarray:
    """(I, T) matrix of smoothed outbreak probabilities, all locations."""
    ws = LikelihoodWorkspace(data, spec)
    gamma = transition_matrix(params.gamma01, params.gamma10)
    delta = stationary_distribution(params.gamma01, params.gamma10)
    return smoothed_probs_batch(ws.log_emissions(params), gamma, delta)


# ---------------------------------------------------------------------------
# brute-force oracles (desk scale only)
# ---------------------------------------------------------------------------

_BRUTE_FORCE_MAX_T = 16


def _path_log_probs(data, spec, params, i):
    """Log joint probability of every hidden path (2^T of them) at location i."""
    n_times = data.n_times
    if n_times > _BRUTE_FORCE_MAX_T:
        raise ValueError(f"brute force limited to T <= {_BRUTE_FORCE_MAX_T}")
    ws = LikelihoodWorkspace(data, spec)
    log_em = ws.log_emissions(params)[i]  # (T, 2)
    with np.errstate(divide="ignore"):
        log_gamma = np.log(transition_matrix(params.gamma01, params.gamma10))
        log_delta = np.log(stationary_distribution(params.gamma01, params.gamma10))
    paths = (np.arange(2 ** n_times)[:, None] >> np.arange(n_times)) & 1  # (P, T)
    total = log_delta[paths[:, 0]]
    total = total + log_em[np.arange(n_times)[None, :], paths].sum(axis=1)
    if n_times > 1:
        total = total + log_gamma[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return paths, total


def brute_force_loglik(data, spec: ModelSpec, params: Parameters, i: int) -> float:
    """Exhaustive 2^T-path likelihood at location i (test oracle)."""
    _, total = _path_log_probs(data, spec, params, i)
    return float(logsumexp(total))


def brute_force_smoothed_probs(data, spec: ModelSpec, params: Parameters,
                               i: int) -> np.ndarray:
    """Exhaustive per-time P(x_t = 1 | y) at location i (test oracle)."""
    paths, total = _path_log_probs(data, spec, params, i)
    norm = logsumexp(total)
    probs = np.empty(data.n_times)
    for t in range(data.n_times):
        on = paths[:, t] == 1
        probs[t] = np.exp(logsumexp(total[on]) - norm) if np.any(on) else 0.0
    return probs
