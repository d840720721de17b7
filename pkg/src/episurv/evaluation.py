"""Model checking and outbreak-classification scoring.

Posterior predictive bands replicate full datasets under retained draws
(fresh hidden outbreak paths from each draw's transition matrix by default,
optionally paths resampled from the smoothed probabilities), total the
counts per time point, and report central 95% bands plus the share of
observed totals they cover.  ROC curves sweep thresholds over the unique
scores with ties averaged, which makes the trapezoidal area equal to the
rank-based (Mann-Whitney) statistic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .hmm import LikelihoodWorkspace, smoothed_probs_batch
from .model import ModelSpec, stationary_distribution, transition_matrix
from .sampler import PosteriorSamples
from .simulator import generate_counts


@dataclass(frozen=True)
class PredictiveBand:
    """Per-time 95% band and mean of replicated total counts, plus the
    fraction of observed totals falling inside the band."""

    lower: np.ndarray
    mean: np.ndarray
    upper: np.ndarray
    coverage_fraction: float

    def __post_init__(self):
        if np.any(self.lower > self.mean) or np.any(self.mean > self.upper):
            raise ValueError("band must satisfy lower <= mean <= upper")
        if not 0.0 <= self.coverage_fraction <= 1.0:
            raise ValueError("coverage fraction must lie in [0, 1]")


@dataclass(frozen=True)
class RocCurve:
    """Ordered (false positive rate, true positive rate) points and the
    trapezoidal area under them."""

    points: np.ndarray
    auc: float

    def __post_init__(self):
        pts = self.points
        if np.any(np.diff(pts[:, 0]) < 0) or np.any(np.diff(pts[:, 1]) < 0):
            raise ValueError("ROC points must be monotone nondecreasing")
        if not (np.allclose(pts[0], (0.0, 0.0)) and np.allclose(pts[-1], (1.0, 1.0))):
            raise ValueError("ROC curve must run from (0,0) to (1,1)")
        if not 0.0 <= self.auc <= 1.0:
            raise ValueError("AUC must lie in [0, 1]")


def _sample_state_paths(n_locations, n_times, gamma01, gamma10, rng):
    """Fresh hidden paths for every location, stationary start."""
    delta1 = gamma01 / (gamma01 + gamma10)
    u = rng.random((n_locations, n_times))
    x = np.empty((n_locations, n_times), dtype=np.int64)
    x[:, 0] = u[:, 0] < delta1
    for t in range(1, n_times):
        x[:, t] = np.where(x[:, t - 1] == 0, u[:, t] < gamma01, u[:, t] >= gamma10)
    return x


def posterior_predictive(data, spec: ModelSpec, samples: PosteriorSamples,
                         rng=None, max_draws: int = 1000,
                         state_mode: str = "prior") -> PredictiveBand:
    """Replicate total counts per time point under posterior draws.

    ``state_mode="prior"`` draws fresh outbreak paths from each draw's
    transition matrix (checks the full generative model);
    ``state_mode="smoothed"`` instead resamples states from the smoothed
    per-time outbreak probabilities.  Missing cells are excluded from both
    the observed and replicated totals.
    """
    if state_mode not in ("prior", "smoothed"):
        raise ValueError("state_mode must be 'prior' or 'smoothed'")
    n_draws = samples.n_draws
    if n_draws < 100:
        raise ValueError("need at least 100 retained draws")
    rng = np.random.default_rng(rng)
    take = min(max_draws, n_draws)
    picks = np.linspace(0, n_draws - 1, take).astype(int)
    stacked = samples.stacked()
    layout = samples.layout
    observed_mask = ~data.missing
    ws = LikelihoodWorkspace(data, spec) if state_mode == "smoothed" else None

    totals = np.empty((take, data.n_times))
    for row, pick in enumerate(picks):
        params = layout.unpack(stacked[pick])
        if state_mode == "prior" or spec.covariate_dim == 0:
            states = _sample_state_paths(data.n_locations, data.n_times,
                                         params.gamma01, params.gamma10, rng)
        else:
            probs = smoothed_probs_batch(
                ws.log_emissions(params),
                transition_matrix(params.gamma01, params.gamma10),
                stationary_distribution(params.gamma01, params.gamma10))
            states = (rng.random(probs.shape) < probs).astype(np.int64)
        replicate = generate_counts(spec.variant, params.beta, params.trend,
                                    params.seasonal, params.spatial, states,
                                    data.populations, data.adjacency, rng)
        totals[row] = np.where(observed_mask, replicate, 0).sum(axis=0)

    lower = np.quantile(totals, 0.025, axis=0)
    upper = np.quantile(totals, 0.975, axis=0)
    mean = totals.mean(axis=0)
    observed_totals = np.where(observed_mask, data.counts, 0).sum(axis=0)
    inside = (observed_totals >= lower) & (observed_totals <= upper)
    return PredictiveBand(lower=lower, mean=mean, upper=upper,
                          coverage_fraction=float(inside.mean()))


def roc_auc(truth: np.ndarray, scores: np.ndarray,
            subset: Optional[np.ndarray] = None) -> RocCurve:
    """ROC curve of outbreak scores against true indicators.

    ``truth`` and ``scores`` are (T, I) matrices; ``subset`` optionally
    restricts to a list of location (column) indices, supporting per-group
    curves such as small versus large cities.
    """
    truth = np.asarray(truth)
    scores = np.asarray(scores, dtype=float)
    if truth.shape != scores.shape:
        raise ValueError("truth and scores must share shape")
    if subset is not None:
        truth = truth[:, list(subset)]
        scores = scores[:, list(subset)]
    labels = truth.ravel().astype(bool)
    values = scores.ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("need at least one positive and one negative label")

    order = np.argsort(-values, kind="stable")
    sorted_labels = labels[order]
    sorted_values = values[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # keep one operating point per unique threshold (ties grouped)
    last_of_threshold = np.nonzero(np.diff(sorted_values, append=-np.inf))[0]
    tpr = np.concatenate([[0.0], tp[last_of_threshold] / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp[last_of_threshold] / n_neg, [1.0]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(points=np.column_stack([fpr, tpr]), auc=auc)


def outbreak_correlation(prob_maps) -> np.ndarray:
    """Pairwise Pearson correlation between flattened outbreak-probability
    maps from different models or runs."""
    maps = [np.asarray(m, dtype=float) for m in prob_maps]
    if len(maps) < 2:
        raise ValueError("need at least 2 probability maps")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError("probability maps must share shape")
        if np.ptp(m) == 0:
            raise ValueError("zero-variance probability map")
    return np.corrcoef(np.stack([m.ravel() for m in maps]))


def relative_risks(samples: PosteriorSamples) -> np.ndarray:
    """Per-location posterior median of exp(spatial effect); the reference
    level exp(0) is the geometric mean risk under the sum-to-zero
    constraint."""
    draws = samples.stacked()[:, samples.layout.spatial]
    return np.median(np.exp(draws), axis=0)
