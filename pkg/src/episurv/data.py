"""Input handling for areal count surveillance data.

Reads count/population matrices and adjacency information, and builds the
three structure matrices used as precision templates for the smooth-trend,
cyclic-seasonal, and spatial random-field priors.

File formats:
  * matrix CSV: header row = time labels, first column = location labels,
    UTF-8, `.` decimal separator; missing counts are empty cells or `NA`;
  * edge list: one `labelA,labelB` pair per line, undirected, duplicates
    ignored, `#` starts a comment;
  * coordinates: one `label,lat,lon` line per location (decimal degrees).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

EARTH_RADIUS_KM = 6371.0

# Eigenvalues below this are treated as the null space of a structure matrix.
NULL_EIGENVALUE_TOL = 1e-9


@dataclass(frozen=True)
class Adjacency:
    """Undirected neighbourhood structure over locations.

    ``neighbor_sets[i]`` is the set of indices adjacent to location ``i``;
    ``num_components`` is the number of connected components of the graph.
    """

    neighbor_sets: tuple[frozenset[int], ...]
    num_components: int

    def __post_init__(self):
        n = len(self.neighbor_sets)
        for i, nbrs in enumerate(self.neighbor_sets):
            if i in nbrs:
                raise ValueError(f"self-loop at location {i}")
            for j in nbrs:
                if not 0 <= j < n:
                    raise ValueError(f"neighbor index {j} out of range")
                if i not in self.neighbor_sets[j]:
                    raise ValueError(f"asymmetric adjacency: {i}->{j}")
        if self.num_components != _count_components(self.neighbor_sets):
            raise ValueError("num_components inconsistent with the graph")

    @property
    def n_locations(self) -> int:
        return len(self.neighbor_sets)

    @property
    def n_edges(self) -> int:
        return sum(len(s) for s in self.neighbor_sets) // 2

    @classmethod
    def from_edges(cls, n_locations: int, edges) -> "Adjacency":
        """Build from an iterable of (i, j) index pairs; duplicates ignored."""
        sets = [set() for _ in range(n_locations)]
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-loop at location {i}")
            if not (0 <= i < n_locations and 0 <= j < n_locations):
                raise ValueError(f"edge ({i},{j}) out of range")
            sets[i].add(j)
            sets[j].add(i)
        frozen = tuple(frozenset(s) for s in sets)
        return cls(frozen, _count_components(frozen))

    def matrix(self) -> np.ndarray:
        """Dense 0/1 adjacency matrix (useful for neighbour sums)."""
        n = self.n_locations
        a = np.zeros((n, n))
        for i, nbrs in enumerate(self.neighbor_sets):
            for j in nbrs:
                a[i, j] = 1.0
        return a


def _count_components(neighbor_sets) -> int:
    n = len(neighbor_sets)
    seen = [False] * n
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            i = stack.pop()
            for j in neighbor_sets[i]:
                if not seen[j]:
                    seen[j] = True
                    stack.append(j)
    return count


@dataclass(frozen=True)
class StructureMatrix:
    """Symmetric positive-semidefinite integer-weight neighbourhood matrix.

    The prior precision of the matching random-field component is the
    matrix scaled by its precision parameter.  ``rank_deficiency`` is the
    dimension of the null space (flat directions of the improper prior).
    """

    entries: np.ndarray
    rank_deficiency: int
    kind: str  # "rw2" | "crw1" | "spatial"

    def __post_init__(self):
        m = self.entries
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("structure matrix must be square")
        if not np.allclose(m, m.T):
            raise ValueError("structure matrix must be symmetric")
        if not np.allclose(m.sum(axis=1), 0.0, atol=1e-9):
            raise ValueError("structure matrix rows must sum to zero")
        if self.rank_deficiency < 0:
            raise ValueError("rank_deficiency must be nonnegative")
        m.flags.writeable = False

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def quadratic_form(self, v: np.ndarray) -> float:
        return float(v @ self.entries @ v)


@dataclass(frozen=True)
class SurveillanceData:
    """Case counts and populations at risk on a spatial graph.

    ``counts`` is (I, T) nonnegative integers with zeros at missing cells;
    ``missing`` marks those cells; ``populations`` is (I, T) strictly
    positive.  Rows are locations, columns are time points.
    """

    counts: np.ndarray
    missing: np.ndarray
    populations: np.ndarray
    adjacency: Adjacency
    location_labels: tuple[str, ...]
    time_labels: tuple[str, ...]

    def __post_init__(self):
        y, miss, pop = self.counts, self.missing, self.populations
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
            raise ValueError("counts must be a nonempty 2-d matrix")
        if miss.shape != y.shape or pop.shape != y.shape:
            raise ValueError("counts, missing, populations must share shape")
        if np.any(y[~miss] < 0):
            raise ValueError("negative count")
        if np.any(~np.isfinite(pop)) or np.any(pop <= 0):
            raise ValueError("nonpositive population")
        if self.adjacency.n_locations != y.shape[0]:
            raise ValueError("adjacency node count does not match counts")
        if len(self.location_labels) != y.shape[0]:
            raise ValueError("location label count mismatch")
        if len(self.time_labels) != y.shape[1]:
            raise ValueError("time label count mismatch")
        y.flags.writeable = False
        miss.flags.writeable = False
        pop.flags.writeable = False

    @property
    def n_locations(self) -> int:
        return self.counts.shape[0]

    @property
    def n_times(self) -> int:
        return self.counts.shape[1]


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

def load_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Read a labeled matrix CSV; returns (values-with-NaN, rows, cols)."""
    frame = pd.read_csv(path, index_col=0)
    values = frame.to_numpy(dtype=float)
    rows = [str(r) for r in frame.index]
    cols = [str(c) for c in frame.columns]
    return values, rows, cols


def load_edge_list(path, labels) -> Adjacency:
    """Read an undirected edge list of label pairs; builds an Adjacency
    over ``labels`` order.  Unknown labels are an error; locations absent
    from the file are isolated nodes."""
    index = {lab: i for i, lab in enumerate(labels)}
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'labelA,labelB'")
        for p in parts:
            if p not in index:
                raise ValueError(f"{path}:{lineno}: unknown label {p!r}")
        edges.append((index[parts[0]], index[parts[1]]))
    return Adjacency.from_edges(len(labels), edges)


def load_coordinates(path) -> tuple[list[str], np.ndarray]:
    """Read `label,lat,lon` lines; returns (labels, (n, 2) degrees)."""
    labels, coords = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'label,lat,lon'")
        labels.append(parts[0])
        coords.append((float(parts[1]), float(parts[2])))
    return labels, np.asarray(coords, dtype=float)


def load_surveillance(counts_path, populations_path, adjacency_path) -> SurveillanceData:
    """Load and validate a dataset from counts, populations, and edge-list files."""
    counts_raw, loc_labels, time_labels = load_matrix_csv(counts_path)
    pops, pop_locs, pop_times = load_matrix_csv(populations_path)
    if pops.shape != counts_raw.shape:
        raise ValueError(
            f"dimension mismatch: counts {counts_raw.shape} vs populations {pops.shape}"
        )
    if pop_locs != loc_labels or pop_times != time_labels:
        raise ValueError("population labels do not match count labels")
    if np.any(np.isnan(pops)):
        raise ValueError("missing population entry (populations may not be missing)")

    missing = np.isnan(counts_raw)
    observed = counts_raw[~missing]
    if np.any(observed < 0):
        raise ValueError("negative count")
    if np.any(observed != np.round(observed)):
        raise ValueError("non-integer count")
    counts = np.where(missing, 0, counts_raw).astype(np.int64)

    adjacency = load_edge_list(adjacency_path, loc_labels)
    return SurveillanceData(
        counts=counts,
        missing=missing,
        populations=pops,
        adjacency=adjacency,
        location_labels=tuple(loc_labels),
        time_labels=tuple(time_labels),
    )


def write_matrix_csv(path, values, row_labels, col_labels, missing=None, integer=False):
    """Write a labeled matrix CSV compatible with :func:`load_matrix_csv`.

    ``missing`` cells are written as empty fields.  Output is byte-stable
    for identical inputs.
    """
    values = np.asarray(values)
    lines = ["," + ",".join(str(c) for c in col_labels)]
    for i, lab in enumerate(row_labels):
        cells = []
        for t in range(values.shape[1]):
            if missing is not None and missing[i, t]:
                cells.append("")
            elif integer:
                cells.append(str(int(values[i, t])))
            else:
                cells.append(repr(float(values[i, t])))
        lines.append(str(lab) + "," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# population interpolation
# ---------------------------------------------------------------------------

def _month_position(label: str) -> float:
    """Map 'YYYY-MM' (or bare 'YYYY') to a fractional-year position."""
    parts = str(label).split("-")
    try:
        year = int(parts[0])
        month = int(parts[1]) if len(parts) > 1 else 1
    except (ValueError, IndexError) as exc:
        raise ValueError(f"bad month label {label!r}; expected YYYY-MM") from exc
    if not 1 <= month <= 12:
        raise ValueError(f"bad month in label {label!r}")
    return year + (month - 1) / 12.0


def interpolate_population(annual, months) -> np.ndarray:
    """Piecewise-linear monthly values from per-location annual anchors.

    ``annual`` is a sequence (one entry per location) of (year, value)
    anchor lists; ``months`` are ordered 'YYYY-MM' labels.  Anchor months
    are exact; months after the final anchor extend flat; months before
    the first anchor are rejected.
    """
    positions = np.array([_month_position(m) for m in months])
    out = np.empty((len(annual), len(positions)))
    for i, anchors in enumerate(annual):
        if len(anchors) < 2:
            raise ValueError(f"location {i}: need at least 2 annual anchors")
        years = np.array([float(y) for y, _ in anchors])
        vals = np.array([float(v) for _, v in anchors])
        if np.any(np.diff(years) <= 0):
            raise ValueError(f"location {i}: years must be strictly increasing")
        if np.any(positions < years[0]):
            raise ValueError(f"location {i}: month before first anchor year")
        out[i] = np.interp(positions, years, vals)
    return out


# ---------------------------------------------------------------------------
# distance-based adjacency
# ---------------------------------------------------------------------------

def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km on a sphere of radius 6371 km."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=float))
                              for x in (lat1, lon1, lat2, lon2))
    a = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return EARTH_RADIUS_KM * 2.0 * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def adjacency_from_distances(coordinates, threshold_km: float) -> Adjacency:
    """Locations are neighbours iff their great-circle distance is within
    ``threshold_km``.  Use :func:`edge_density` to tune the threshold toward
    a desired share of neighbouring pairs."""
    coords = np.asarray(coordinates, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2 or coords.shape[0] < 2:
        raise ValueError("need at least 2 (lat, lon) coordinate pairs")
    if np.any(np.abs(coords[:, 0]) > 90.0) or np.any(np.abs(coords[:, 1]) > 180.0):
        raise ValueError("coordinates out of range")
    if not threshold_km > 0:
        raise ValueError("threshold must be positive")
    n = coords.shape[0]
    edges = []
    for i in range(n):
        d = haversine_km(coords[i, 0], coords[i, 1], coords[i + 1:, 0], coords[i + 1:, 1])
        for off in np.nonzero(d <= threshold_km)[0]:
            edges.append((i, i + 1 + int(off)))
    return Adjacency.from_edges(n, edges)


def edge_density(adjacency: Adjacency) -> float:
    """Share of location pairs that are neighbours."""
    n = adjacency.n_locations
    return adjacency.n_edges / (n * (n - 1) / 2.0)


# ---------------------------------------------------------------------------
# structure matrices
# ---------------------------------------------------------------------------

def structure_matrix_rw2(n_times: int) -> StructureMatrix:
    """Second-order random-walk structure matrix D'D for a smooth trend.

    D is the (T-2, T) second-difference operator; the null space is the
    constant and linear sequences (rank deficiency 2).
    """
    if n_times < 3:
        raise ValueError("trend structure matrix needs T >= 3")
    d = np.diff(np.eye(n_times), n=2, axis=0)
    return StructureMatrix(entries=d.T @ d, rank_deficiency=2, kind="rw2")


def structure_matrix_crw1(cycle_length: int) -> StructureMatrix:
    """Cyclic first-order random-walk structure matrix for seasonality.

    Circulant with 2 on the diagonal and -1 between cyclic neighbours
    (components 1 and C are neighbours); rank deficiency 1.  C=2 would
    double-count its single edge and is rejected.
    """
    if cycle_length < 3:
        raise ValueError("cyclic structure matrix needs C >= 3")
    c = cycle_length
    m = 2.0 * np.eye(c)
    for i in range(c):
        m[i, (i + 1) % c] = -1.0
        m[i, (i - 1) % c] = -1.0
    return StructureMatrix(entries=m, rank_deficiency=1, kind="crw1")


def structure_matrix_spatial(adjacency: Adjacency) -> StructureMatrix:
    """Spatial structure matrix: degree on the diagonal, -1 for neighbours.

    Rank deficiency equals the number of connected components.
    """
    n = adjacency.n_locations
    m = np.zeros((n, n))
    for i, nbrs in enumerate(adjacency.neighbor_sets):
        m[i, i] = float(len(nbrs))
        for j in nbrs:
            m[i, j] = -1.0
    return StructureMatrix(entries=m, rank_deficiency=adjacency.num_components,
                           kind="spatial")
