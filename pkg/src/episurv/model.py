"""Model specification, parameters, outbreak covariates, and log priors.

The log relative risk at location i, time t decomposes into a smooth trend,
a repeating seasonal effect, a static spatial effect, and an outbreak term
that is switched on by a hidden two-state indicator:

    log risk = trend[t] + seasonal[t mod C] + spatial[i] + state * z'beta

Outbreak covariate variants (z) range from a null model ("0", no outbreak
term) through indicator and log-count functions of the previous time point
("I".."VI") to a constant shift ("VII").  Counts are Poisson with mean
population * exp(log risk).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import betaln, gammaln

VARIANTS = ("0", "I", "II", "III", "IV", "V", "VI", "VII")

_TWO_COVARIATE_VARIANTS = ("III", "VI")


@dataclass(frozen=True)
class ModelSpec:
    """Outbreak-component variant plus seasonal cycle length."""

    variant: str
    cycle_length: int = 12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.cycle_length < 3:
            raise ValueError("cycle_length must be >= 3")

    @property
    def covariate_dim(self) -> int:
        if self.variant == "0":
            return 0
        if self.variant in _TWO_COVARIATE_VARIANTS:
            return 2
        return 1

    @classmethod
    def from_config(cls, mapping) -> "ModelSpec":
        """Build from a plain key=value mapping (`variant`, `cycle_length`)."""
        variant = str(mapping.get("variant", "VII"))
        cycle_length = int(mapping.get("cycle_length", 12))
        return cls(variant=variant, cycle_length=cycle_length)

    def to_config(self) -> dict:
        return {"variant": self.variant, "cycle_length": self.cycle_length}


@dataclass
class Parameters:
    """Full continuous parameter state for one model.

    ``seasonal`` and ``spatial`` carry sum-to-zero constraints; the hidden
    outbreak states are never stored here (they are marginalized exactly).
    """

    trend: np.ndarray
    seasonal: np.ndarray
    spatial: np.ndarray
    kappa_trend: float
    kappa_seasonal: float
    kappa_spatial: float
    beta: np.ndarray
    gamma01: float = 0.5
    gamma10: float = 0.5

    def validate(self, spec: Optional[ModelSpec] = None, atol: float = 1e-8):
        if spec is not None:
            if len(self.beta) != spec.covariate_dim:
                raise ValueError("beta length does not match covariate dimension")
            if len(self.seasonal) != spec.cycle_length:
                raise ValueError("seasonal length does not match cycle length")
        if abs(float(np.sum(self.seasonal))) > atol:
            raise ValueError("seasonal components must sum to zero")
        if abs(float(np.sum(self.spatial))) > atol:
            raise ValueError("spatial components must sum to zero")
        for name in ("kappa_trend", "kappa_seasonal", "kappa_spatial"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if np.any(np.asarray(self.beta) <= 0):
            raise ValueError("beta entries must be strictly positive")
        for name in ("gamma01", "gamma10"):
            g = getattr(self, name)
            if not 0.0 < g < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    def copy(self) -> "Parameters":
        return Parameters(
            trend=self.trend.copy(),
            seasonal=self.seasonal.copy(),
            spatial=self.spatial.copy(),
            kappa_trend=self.kappa_trend,
            kappa_seasonal=self.kappa_seasonal,
            kappa_spatial=self.kappa_spatial,
            beta=np.asarray(self.beta, dtype=float).copy(),
            gamma01=self.gamma01,
            gamma10=self.gamma10,
        )


@dataclass(frozen=True)
class GammaPrior:
    """Shape-rate parameterization (mean = shape / rate)."""
    shape: float
    rate: float

    def __post_init__(self):
        if self.shape <= 0 or self.rate <= 0:
            raise ValueError("Gamma prior needs positive shape and rate")


@dataclass(frozen=True)
class BetaPrior:
    a: float
    b: float

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise ValueError("Beta prior needs positive parameters")


@dataclass(frozen=True)
class Hyperpriors:
    """Prior suite: Gamma(2,2) on outbreak coefficients (positive support
    pins the hyper-endemic state to increased risk), Beta(2,2) on the
    transition probabilities, vague Gamma hyperpriors on the precisions."""

    beta_prior: GammaPrior = GammaPrior(2.0, 2.0)
    gamma_prior: BetaPrior = BetaPrior(2.0, 2.0)
    kappa_trend_prior: GammaPrior = GammaPrior(1.0, 0.0001)
    kappa_seasonal_prior: GammaPrior = GammaPrior(1.0, 0.001)
    kappa_spatial_prior: GammaPrior = GammaPrior(1.0, 0.01)


DEFAULT_HYPERPRIORS = Hyperpriors()


def gamma_logpdf(x: float, prior: GammaPrior) -> float:
    """Normalized Gamma(shape, rate) log-density; -inf outside support."""
    if not x > 0 or not np.isfinite(x):
        return -np.inf
    a, b = prior.shape, prior.rate
    return a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(x) - b * x


def beta_logpdf(x: float, prior: BetaPrior) -> float:
    """Normalized Beta(a, b) log-density; -inf outside (0, 1)."""
    if not 0.0 < x < 1.0:
        return -np.inf
    a, b = prior.a, prior.b
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)


# ---------------------------------------------------------------------------
# outbreak covariates
# ---------------------------------------------------------------------------

def lagged_covariates(variant: str, prev_counts: np.ndarray,
                      prev_neighbor_sums: np.ndarray) -> np.ndarray:
    """Covariate rows (I, p) from previous-time counts and neighbour sums.

    ``prev_counts[i]`` is the count at the previous time point at location
    i and ``prev_neighbor_sums[i]`` the sum over its neighbours (missing
    values already replaced by 0).
    """
    own = np.asarray(prev_counts, dtype=float)
    nbr = np.asarray(prev_neighbor_sums, dtype=float)
    if variant == "0":
        return np.empty((own.shape[0], 0))
    if variant == "I":
        return (own > 0).astype(float)[:, None]
    if variant == "II":
        return ((own > 0) | (nbr > 0)).astype(float)[:, None]
    if variant == "III":
        return np.stack([(own > 0).astype(float), (nbr > 0).astype(float)], axis=1)
    if variant == "IV":
        return np.log1p(own)[:, None]
    if variant == "V":
        return np.log1p(own + nbr)[:, None]
    if variant == "VI":
        return np.stack([np.log1p(own), nbr + 1.0], axis=1)
    if variant == "VII":
        return np.ones((own.shape[0], 1))
    raise ValueError(f"unknown variant {variant!r}")


def outbreak_covariates(spec: ModelSpec, data) -> np.ndarray:
    """Full covariate array (I, T, p) from the observed counts.

    The first time point has no predecessor: its covariates are zero for
    every variant except "VII", whose unit covariate does not reference
    previous counts.  Missing previous counts enter as zero.
    """
    y = np.where(data.missing, 0, data.counts).astype(float)
    n_loc, n_time = y.shape
    p = spec.covariate_dim
    z = np.zeros((n_loc, n_time, p))
    if p == 0:
        return z
    if spec.variant == "VII":
        z[:, :, 0] = 1.0
        return z
    adj = data.adjacency.matrix()
    nbr_sums = adj @ y  # (I, T): neighbour totals per time
    for t in range(1, n_time):
        z[:, t, :] = lagged_covariates(spec.variant, y[:, t - 1], nbr_sums[:, t - 1])
    return z


def outbreak_covariate(spec: ModelSpec, data, i: int, t: int) -> np.ndarray:
    """Covariate vector z (length p) at 0-based location i, time t."""
    if not (0 <= i < data.n_locations and 0 <= t < data.n_times):
        raise IndexError(f"index ({i}, {t}) out of range")
    if spec.covariate_dim == 0:
        return np.empty(0)
    if spec.variant == "VII":
        return np.ones(1)
    if t == 0:
        return np.zeros(spec.covariate_dim)
    y = np.where(data.missing, 0, data.counts).astype(float)
    prev = y[:, t - 1]
    nbr = sum(prev[j] for j in data.adjacency.neighbor_sets[i])
    return lagged_covariates(spec.variant,
                             prev[i:i + 1], np.array([nbr]))[0]


# ---------------------------------------------------------------------------
# log risk and log prior
# ---------------------------------------------------------------------------

def log_risk(params: Parameters, spec: ModelSpec, z: np.ndarray, x: int,
             i: int, t: int) -> float:
    """Log relative risk at 0-based (i, t) for hidden state x in {0, 1}.

    The Poisson mean is population * exp(log risk).
    """
    base = (params.trend[t]
            + params.seasonal[t % spec.cycle_length]
            + params.spatial[i])
    if x and spec.covariate_dim:
        base += float(np.dot(z, params.beta))
    return float(base)


def transition_matrix(gamma01: float, gamma10: float) -> np.ndarray:
    """Two-state transition matrix [[1-g01, g01], [g10, 1-g10]]."""
    if not (0.0 < gamma01 < 1.0 and 0.0 < gamma10 < 1.0):
        raise ValueError("transition probabilities must lie in (0, 1)")
    return np.array([[1.0 - gamma01, gamma01], [gamma10, 1.0 - gamma10]])


def stationary_distribution(gamma01: float, gamma10: float) -> np.ndarray:
    """Stationary law of the two-state chain: (g10, g01) / (g01 + g10)."""
    if not (0.0 < gamma01 < 1.0 and 0.0 < gamma10 < 1.0):
        raise ValueError("transition probabilities must lie in (0, 1)")
    total = gamma01 + gamma10
    return np.array([gamma10 / total, gamma01 / total])


def log_prior(params: Parameters, spec: ModelSpec, trend_structure,
              seasonal_structure, spatial_structure,
              hyper: Hyperpriors = DEFAULT_HYPERPRIORS) -> float:
    """Joint log prior density of all continuous parameters.

    Convention for constants, applied identically to every candidate model
    so that evidence comparisons are meaningful: the improper flat
    directions of the trend prior contribute 0; powers of 2*pi from the
    three random-field priors are dropped (they are shared across models
    with common dimensions); the Beta and Gamma factors for the outbreak
    parameters are fully normalized because the null variant lacks them.
    Returns -inf (never raises) outside the support.
    """
    kt, ks, ku = params.kappa_trend, params.kappa_seasonal, params.kappa_spatial
    if not (kt > 0 and ks > 0 and ku > 0):
        return -np.inf

    n_times = len(params.trend)
    rank_t = n_times - trend_structure.rank_deficiency
    rank_s = spec.cycle_length - seasonal_structure.rank_deficiency
    rank_u = len(params.spatial) - spatial_structure.rank_deficiency

    total = 0.5 * rank_t * np.log(kt) - 0.5 * kt * trend_structure.quadratic_form(params.trend)
    total += 0.5 * rank_s * np.log(ks) - 0.5 * ks * seasonal_structure.quadratic_form(params.seasonal)
    total += 0.5 * rank_u * np.log(ku) - 0.5 * ku * spatial_structure.quadratic_form(params.spatial)

    total += gamma_logpdf(kt, hyper.kappa_trend_prior)
    total += gamma_logpdf(ks, hyper.kappa_seasonal_prior)
    total += gamma_logpdf(ku, hyper.kappa_spatial_prior)

    if spec.covariate_dim:
        total += beta_logpdf(params.gamma01, hyper.gamma_prior)
        total += beta_logpdf(params.gamma10, hyper.gamma_prior)
        for b in np.atleast_1d(params.beta):
            total += gamma_logpdf(float(b), hyper.beta_prior)
    return float(total)
