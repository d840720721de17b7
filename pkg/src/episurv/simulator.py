"""Synthetic surveillance data generation for validation studies.

Components are simulated independently: a second-order random-walk trend,
a sinusoidal seasonal pattern (mean-centered onto the constraint surface),
a constrained intrinsic Gaussian random-field spatial effect, and hidden
outbreak paths started from the stationary law of the two-state chain.
Counts are then drawn sequentially in time because the outbreak covariates
feed on the previous month's simulated counts.

Component streams are seeded separately so the same trend/seasonal/spatial
fields and outbreak paths can be shared across datasets generated under
different outbreak variants.

The bundled nine-city study graph (five small cities of ~500k, four large
of ~1M, on a 3x3 lattice) is an assumed layout: only the city counts and
sizes are fixed by the study design, not the exact border pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Adjacency, StructureMatrix, SurveillanceData, write_matrix_csv
from .model import ModelSpec, Parameters, lagged_covariates

# Outbreak coefficients used in the validation study, per variant.
DEFAULT_OUTBREAK_COEFFICIENTS = {
    "0": (),
    "I": (1.65,),
    "II": (1.65,),
    "III": (1.25, 0.75),
    "IV": (0.55,),
    "V": (0.49,),
    "VI": (0.35, 0.20),
    "VII": (1.65,),
}

POISSON_MEAN_LIMIT = 1e9

NINE_CITY_LABELS = ("S1", "L1", "S2", "L2", "S3", "L3", "S4", "L4", "S5")
NINE_CITY_MEAN_POPULATIONS = (5e5, 1e6, 5e5, 1e6, 5e5, 1e6, 5e5, 1e6, 5e5)
# 3x3 lattice, rook adjacency; small cities on corners and center.
NINE_CITY_EDGES = (
    ("S1", "L1"), ("L1", "S2"), ("S1", "L2"), ("L1", "S3"),
    ("S2", "L3"), ("L2", "S3"), ("S3", "L3"), ("L2", "S4"),
    ("S3", "L4"), ("L3", "S5"), ("S4", "L4"), ("L4", "S5"),
)


def nine_city_adjacency() -> tuple[Adjacency, tuple[str, ...], tuple[float, ...]]:
    """The bundled nine-city study graph: (adjacency, labels, mean populations)."""
    index = {lab: i for i, lab in enumerate(NINE_CITY_LABELS)}
    edges = [(index[a], index[b]) for a, b in NINE_CITY_EDGES]
    return (Adjacency.from_edges(len(NINE_CITY_LABELS), edges),
            NINE_CITY_LABELS, NINE_CITY_MEAN_POPULATIONS)


def month_labels(n_times: int, start_year: int = 2015) -> tuple[str, ...]:
    """Consecutive 'YYYY-MM' labels starting in January of ``start_year``."""
    return tuple(f"{start_year + t // 12}-{t % 12 + 1:02d}" for t in range(n_times))


@dataclass
class SimulationConfig:
    """Study design constants.

    Defaults reproduce the validation setup: 5 years of monthly data on the
    nine-city graph, intercept -14 (so baseline means are a few cases per
    100k), a very smooth trend (precision 1e4), seasonal amplitude 1.4 at
    one cycle per year, spatial precision 25, and a chain spending twice as
    long endemic as hyper-endemic (0.1 / 0.2).
    """

    variant: str = "I"
    n_times: int = 60
    cycle_length: int = 12
    intercept: float = -14.0
    kappa_trend: float = 1e4
    amplitude: float = 1.4
    frequency: float = 1.0 / 12.0
    kappa_spatial: float = 25.0
    gamma01: float = 0.1
    gamma10: float = 0.2
    beta: Optional[tuple] = None  # None -> study default for the variant
    mean_populations: Optional[tuple] = None  # None -> nine-city defaults
    population_jitter: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_times < 3 or self.cycle_length < 3:
            raise ValueError("n_times and cycle_length must be >= 3")
        if not 0.0 < self.frequency <= 0.5:
            raise ValueError("frequency must lie in (0, 0.5]")
        if self.kappa_trend <= 0 or self.kappa_spatial <= 0:
            raise ValueError("precisions must be positive")
        if not (0.0 < self.gamma01 < 1.0 and 0.0 < self.gamma10 < 1.0):
            raise ValueError("transition probabilities must lie in (0, 1)")
        if self.beta is None:
            self.beta = DEFAULT_OUTBREAK_COEFFICIENTS[ModelSpec(self.variant).variant]

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(variant=self.variant, cycle_length=self.cycle_length)


@dataclass
class SimulationTruth:
    """Ground-truth components behind a simulated dataset."""

    trend: np.ndarray
    seasonal: np.ndarray
    spatial: np.ndarray
    states: np.ndarray       # (I, T) hidden outbreak indicators
    populations: np.ndarray  # (I,) per-location size, constant in time
    variant: str
    beta: tuple
    gamma01: float
    gamma10: float

    @property
    def outbreak_inert(self) -> bool:
        """True when the variant carries no outbreak term, making the
        simulated states irrelevant to the counts."""
        return self.variant == "0"

    def to_json_dict(self) -> dict:
        return {
            "variant": self.variant,
            "outbreak_inert": self.outbreak_inert,
            "beta": list(self.beta),
            "gamma01": self.gamma01,
            "gamma10": self.gamma10,
            "trend": self.trend.tolist(),
            "seasonal": self.seasonal.tolist(),
            "spatial": self.spatial.tolist(),
            "states": self.states.astype(int).tolist(),
            "populations": self.populations.tolist(),
        }


# ---------------------------------------------------------------------------
# component simulators
# ---------------------------------------------------------------------------

def simulate_trend(n_times: int, intercept: float, kappa: float, rng) -> np.ndarray:
    """Second-order random walk: first two values at the intercept, then
    each step extrapolates linearly plus Normal(0, 1/kappa) noise."""
    if n_times < 3:
        raise ValueError("trend simulation needs T >= 3")
    eps = rng.normal(0.0, 1.0 / np.sqrt(kappa), size=n_times - 2)
    # second differences are the noise; integrate twice from (r1, r2)
    first_diff = np.concatenate([[0.0], np.cumsum(eps)])
    return intercept + np.concatenate([[0.0], np.cumsum(first_diff)])


def simulate_seasonal(cycle_length: int, amplitude: float, frequency: float) -> np.ndarray:
    """Sinusoidal seasonal profile amplitude*sin(2*pi*f*c) for c = 1..C,
    mean-centered to satisfy the sum-to-zero constraint."""
    if cycle_length < 3:
        raise ValueError("seasonal simulation needs C >= 3")
    c = np.arange(1, cycle_length + 1)
    s = amplitude * np.sin(2.0 * np.pi * frequency * c)
    return s - s.mean()


def simulate_spatial_igmrf(structure: StructureMatrix, kappa: float, rng) -> np.ndarray:
    """Sample the intrinsic Gaussian field with precision kappa * structure,
    constrained to the span of the non-null eigenvectors (each flat
    direction, one per graph component, gets coefficient zero)."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    eigvals, eigvecs = np.linalg.eigh(structure.entries)
    keep = slice(structure.rank_deficiency, None)  # ascending order
    coeffs = rng.normal(size=structure.size - structure.rank_deficiency)
    coeffs = coeffs / np.sqrt(kappa * eigvals[keep])
    return eigvecs[:, keep] @ coeffs


def simulate_hmm_path(n_times: int, gamma01: float, gamma10: float, rng) -> np.ndarray:
    """Hidden outbreak path: stationary start, then chain transitions."""
    if not (0.0 < gamma01 < 1.0 and 0.0 < gamma10 < 1.0):
        raise ValueError("transition probabilities must lie in (0, 1)")
    u = rng.random(n_times)
    x = np.empty(n_times, dtype=np.int64)
    delta1 = gamma01 / (gamma01 + gamma10)
    x[0] = u[0] < delta1
    for t in range(1, n_times):
        x[t] = (u[t] < gamma01) if x[t - 1] == 0 else (u[t] >= gamma10)
    return x


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

def generate_counts(variant: str, beta, trend, seasonal, spatial, states,
                    populations, adjacency: Adjacency, rng) -> np.ndarray:
    """Draw Poisson counts sequentially in time; the outbreak covariates at
    time t are functions of the counts generated at t-1."""
    beta = np.asarray(beta, dtype=float)
    n_loc, n_times = states.shape
    cycle = len(seasonal)
    adj = adjacency.matrix()
    base = trend[None, :] + seasonal[np.arange(n_times) % cycle][None, :] + spatial[:, None]
    y = np.zeros((n_loc, n_times), dtype=np.int64)
    for t in range(n_times):
        if beta.size == 0:
            shift = 0.0
        elif t == 0 and variant != "VII":
            shift = 0.0  # no previous counts: covariates are zero
        else:
            prev = y[:, t - 1].astype(float) if t > 0 else np.zeros(n_loc)
            z = lagged_covariates(variant, prev, adj @ prev)
            shift = (z @ beta) * states[:, t]
        with np.errstate(over="ignore"):
            mean = populations[:, t] * np.exp(base[:, t] + shift)
        if np.any(mean > POISSON_MEAN_LIMIT):
            worst = int(np.argmax(mean))
            raise ValueError(
                f"Poisson mean overflow at location {worst}, time {t}: "
                f"{mean[worst]:.3e} exceeds {POISSON_MEAN_LIMIT:.0e}")
        y[:, t] = rng.poisson(mean)
    return y


@dataclass
class SimulatedComponents:
    trend: np.ndarray
    seasonal: np.ndarray
    spatial: np.ndarray
    states: np.ndarray
    populations: np.ndarray  # (I,)


def simulate_components(config: SimulationConfig, adjacency: Adjacency,
                        mean_populations) -> SimulatedComponents:
    """Simulate the shared latent components using per-component seed
    streams, so different variants can reuse identical components."""
    from .data import structure_matrix_spatial

    seeds = np.random.SeedSequence(config.seed).spawn(4)
    rng_trend, rng_spatial, rng_states, rng_pops = (np.random.default_rng(s) for s in seeds)
    n_loc = adjacency.n_locations
    trend = simulate_trend(config.n_times, config.intercept, config.kappa_trend, rng_trend)
    seasonal = simulate_seasonal(config.cycle_length, config.amplitude, config.frequency)
    spatial = simulate_spatial_igmrf(structure_matrix_spatial(adjacency),
                                     config.kappa_spatial, rng_spatial)
    states = np.stack([simulate_hmm_path(config.n_times, config.gamma01,
                                         config.gamma10, rng_states)
                       for _ in range(n_loc)])
    means = np.asarray(mean_populations, dtype=float)
    jitter = config.population_jitter
    # lognormal around the target mean with ~jitter relative spread
    pops = means * np.exp(rng_pops.normal(0.0, jitter, size=n_loc) - 0.5 * jitter ** 2)
    return SimulatedComponents(trend, seasonal, spatial, states, pops)


def simulate_dataset(config: SimulationConfig, adjacency: Optional[Adjacency] = None,
                     location_labels=None, mean_populations=None,
                     components: Optional[SimulatedComponents] = None,
                     ) -> tuple[SurveillanceData, SimulationTruth]:
    """Simulate a full dataset plus its ground truth.

    Without an explicit graph the bundled nine-city layout is used.  Pass
    ``components`` to reuse latent fields across variants; the count draw
    then still uses a fresh stream derived from the config seed.
    """
    if adjacency is None:
        adjacency, labels, pops = nine_city_adjacency()
        location_labels = location_labels or labels
        mean_populations = mean_populations or pops
    else:
        if location_labels is None:
            location_labels = tuple(f"loc{i + 1:02d}" for i in range(adjacency.n_locations))
        if mean_populations is None:
            raise ValueError("mean_populations required with a custom adjacency")
    if len(mean_populations) != adjacency.n_locations:
        raise ValueError("mean_populations length must match the graph size")

    if components is None:
        components = simulate_components(config, adjacency, mean_populations)
    rng_counts = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(5)[4])

    populations = np.tile(components.populations[:, None], (1, config.n_times))
    counts = generate_counts(config.variant, config.beta, components.trend,
                             components.seasonal, components.spatial,
                             components.states, populations, adjacency, rng_counts)
    data = SurveillanceData(
        counts=counts,
        missing=np.zeros_like(counts, dtype=bool),
        populations=populations,
        adjacency=adjacency,
        location_labels=tuple(location_labels),
        time_labels=month_labels(config.n_times),
    )
    truth = SimulationTruth(
        trend=components.trend, seasonal=components.seasonal,
        spatial=components.spatial, states=components.states,
        populations=components.populations, variant=config.variant,
        beta=tuple(config.beta), gamma01=config.gamma01, gamma10=config.gamma10,
    )
    return data, truth


def true_parameters(truth: SimulationTruth, kappa_trend: float, kappa_seasonal: float,
                    kappa_spatial: float) -> Parameters:
    """Package simulation truth as a parameter state (useful in tests; the
    seasonal/spatial fields are re-centered to the exact constraint)."""
    seasonal = truth.seasonal - truth.seasonal.mean()
    spatial = truth.spatial - truth.spatial.mean()
    return Parameters(
        trend=truth.trend.copy(), seasonal=seasonal, spatial=spatial,
        kappa_trend=kappa_trend, kappa_seasonal=kappa_seasonal,
        kappa_spatial=kappa_spatial,
        beta=np.asarray(truth.beta, dtype=float),
        gamma01=truth.gamma01, gamma10=truth.gamma10,
    )


def write_dataset(out_dir, data: SurveillanceData, truth: Optional[SimulationTruth] = None):
    """Write counts/populations/adjacency CSVs (the same formats the loader
    ingests) plus truth.json when ground truth is available."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "counts.csv", data.counts, data.location_labels,
                     data.time_labels, missing=data.missing, integer=True)
    write_matrix_csv(out / "populations.csv", data.populations,
                     data.location_labels, data.time_labels)
    lines = []
    for i, nbrs in enumerate(data.adjacency.neighbor_sets):
        for j in sorted(nbrs):
            if i < j:
                lines.append(f"{data.location_labels[i]},{data.location_labels[j]}")
    (out / "adjacency.csv").write_text("\n".join(lines) + "\n")
    written = ["counts.csv", "populations.csv", "adjacency.csv"]
    if truth is not None:
        (out / "truth.json").write_text(
            json.dumps(truth.to_json_dict(), sort_keys=True, indent=1) + "\n")
        written.append("truth.json")
    return written
