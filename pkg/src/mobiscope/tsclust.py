"""DTW distances, complete-linkage clustering, and cluster validity indices.

The distance is classic dynamic time warping over 1-D series with absolute
difference as the local cost. Two step patterns are supported:

- ``symmetric1``: horizontal, vertical, and diagonal moves all weigh the
  local cost once;
- ``symmetric2``: the diagonal move weighs the local cost twice (the usual
  normalizable pattern); an optional normalization divides the total cost by
  ``len(x) + len(y)``.

Clustering is standard agglomerative merging on a precomputed distance
matrix. Everything downstream of the distances (medoids, validity indices)
works purely in distance space: there is no vector mean under DTW, so
centroid-based indices use medoids as centers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numba import njit

from .core import PanelSeries

__all__ = [
    "DtwConfig",
    "dtw_distance",
    "interpolate_missing",
    "DistanceMatrix",
    "distance_matrix",
    "Dendrogram",
    "hcluster",
    "ClusterSolution",
    "cut",
    "validity_indices",
    "CVI_NAMES",
]

CVI_NAMES = ("Sil", "SF", "CH", "DB", "DBstar", "Dunn", "COP")

STEP_PATTERNS = ("symmetric1", "symmetric2")


@dataclass(frozen=True)
class DtwConfig:
    """DTW configuration: step pattern, optional band, normalization.

    ``window`` is a Sakoe-Chiba band radius in days (|i - j| <= window);
    None disables the band. ``normalize`` divides the cost by
    len(x) + len(y) and is defined for symmetric2 only.
    """

    step_pattern: str = "symmetric2"
    window: "int | None" = None
    normalize: bool = False

    def __post_init__(self) -> None:
        if self.step_pattern not in STEP_PATTERNS:
            raise ValueError(f"unknown step pattern {self.step_pattern!r}")
        if self.window is not None and self.window < 1:
            raise ValueError("window radius must be >= 1")
        if self.normalize and self.step_pattern != "symmetric2":
            raise ValueError("normalization is defined for symmetric2 only")


@njit(cache=True, nogil=True)
def _dtw_cost(x, y, diag_weight, window):  # pragma: no cover - jitted
    n = x.shape[0]
    m = y.shape[0]
    inf = np.inf
    acc = np.full((n, m), inf)
    for i in range(n):
        if window < 0:
            lo, hi = 0, m
        else:
            lo = i - window
            if lo < 0:
                lo = 0
            hi = i + window + 1
            if hi > m:
                hi = m
        for j in range(lo, hi):
            c = abs(x[i] - y[j])
            if i == 0 and j == 0:
                acc[i, j] = c
                continue
            best = inf
            if i > 0:
                v = acc[i - 1, j] + c
                if v < best:
                    best = v
            if j > 0:
                v = acc[i, j - 1] + c
                if v < best:
                    best = v
            if i > 0 and j > 0:
                v = acc[i - 1, j - 1] + diag_weight * c
                if v < best:
                    best = v
            acc[i, j] = best
    return acc[n - 1, m - 1]


def dtw_distance(x, y, cfg: DtwConfig = DtwConfig()) -> float:
    """Minimal cumulative warping cost between two complete series.

    Inputs may be arrays or sequences; they must be non-empty and free of
    NaNs (interpolate first — see :func:`interpolate_missing`). A band too
    narrow to connect the two endpoints raises a ValueError.
    """
    xv = np.ascontiguousarray(x, dtype=float)
    yv = np.ascontiguousarray(y, dtype=float)
    if xv.ndim != 1 or yv.ndim != 1:
        raise ValueError("series must be one-dimensional")
    if xv.size == 0 or yv.size == 0:
        raise ValueError("series must be non-empty")
    if np.isnan(xv).any() or np.isnan(yv).any():
        raise ValueError("series contain missing values; interpolate first")
    diag = 2.0 if cfg.step_pattern == "symmetric2" else 1.0
    band = -1 if cfg.window is None else int(cfg.window)
    cost = float(_dtw_cost(xv, yv, diag, band))
    if math.isinf(cost):
        raise ValueError(
            f"band radius {cfg.window} admits no warping path for lengths "
            f"{xv.size} and {yv.size}"
        )
    if cfg.normalize:
        cost /= xv.size + yv.size
    return cost


def interpolate_missing(series: PanelSeries) -> np.ndarray:
    """Linearly interpolate missing days; ends are extended flat."""
    present = np.flatnonzero(~series.missing)
    if present.size == 0:
        raise ValueError(f"series {series.unit_id!r} has no present values")
    if present.size == len(series):
        return series.values.copy()
    return np.interp(
        np.arange(len(series)), present, series.values[present]
    )


@dataclass(frozen=True)
class DistanceMatrix:
    """Symmetric pairwise distances with the unit ids they index."""

    unit_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        n = len(self.unit_ids)
        if v.shape != (n, n):
            raise ValueError("matrix shape does not match unit ids")
        if np.any(v < 0):
            raise ValueError("distances must be non-negative")
        if not np.allclose(v, v.T, atol=1e-12):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.abs(np.diag(v)) > 1e-12):
            raise ValueError("distance matrix diagonal must be zero")
        object.__setattr__(self, "values", v)
        self.values.setflags(write=False)

    def __len__(self) -> int:
        return len(self.unit_ids)

    def index_of(self, unit_id: str) -> int:
        return self.unit_ids.index(unit_id)


def distance_matrix(
    series: Sequence[PanelSeries],
    cfg: DtwConfig = DtwConfig(),
    n_threads: int = 1,
) -> DistanceMatrix:
    """All pairwise DTW distances between the given series.

    Missing days are linearly interpolated before measuring. Upper-triangle
    pairs are computed in parallel when ``n_threads`` > 1 (the kernel
    releases the GIL).
    """
    if len(series) < 2:
        raise ValueError("need at least two series")
    ids = tuple(s.unit_id for s in series)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate unit ids among series")
    arrays = [interpolate_missing(s) for s in series]
    n = len(arrays)
    out = np.zeros((n, n))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def compute(pair):
        i, j = pair
        try:
            return i, j, dtw_distance(arrays[i], arrays[j], cfg)
        except ValueError as exc:
            raise ValueError(f"pair ({ids[i]!r}, {ids[j]!r}): {exc}") from exc

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(compute, pairs))
    else:
        results = [compute(p) for p in pairs]
    for i, j, d in results:
        out[i, j] = out[j, i] = d
    return DistanceMatrix(ids, out)


@dataclass(frozen=True)
class Dendrogram:
    """Agglomerative merge history over ``n_leaves`` units.

    Cluster ids follow the usual convention: leaves are 0..n-1 in unit-id
    order, and the t-th merge (0-based) creates cluster id n + t. ``merges``
    holds (smaller id, larger id, height) rows; heights are non-decreasing
    under complete linkage. ``leaf_order`` is the left-to-right leaf
    sequence obtained by walking the tree.
    """

    unit_ids: tuple[str, ...]
    merges: tuple[tuple[int, int, float], ...]
    leaf_order: tuple[int, ...]

    @property
    def n_leaves(self) -> int:
        return len(self.unit_ids)

    def heights(self) -> list[float]:
        return [h for _, _, h in self.merges]


def hcluster(dmatrix: DistanceMatrix, linkage: str = "complete") -> Dendrogram:
    """Agglomerative clustering; only complete linkage is offered.

    At every step the two active clusters at minimal distance merge; ties
    break deterministically on the (smaller id, larger id) pair. Distances
    to the merged cluster follow the complete-linkage update
    d(A∪B, X) = max(d(A, X), d(B, X)).
    """
    if linkage != "complete":
        raise ValueError(f"unsupported linkage {linkage!r}")
    n = len(dmatrix)
    # working distance store indexed by active cluster id
    dist: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            dist[(i, j)] = float(dmatrix.values[i, j])
    active = set(range(n))
    children: dict[int, tuple[int, int]] = {}
    merges: list[tuple[int, int, float]] = []
    next_id = n

    def get(a: int, b: int) -> float:
        return dist[(a, b) if a < b else (b, a)]

    for _ in range(n - 1):
        best = None
        for a in sorted(active):
            for b in sorted(active):
                if b <= a:
                    continue
                d = get(a, b)
                key = (d, a, b)
                if best is None or key < best:
                    best = key
        d, a, b = best
        merges.append((a, b, d))
        children[next_id] = (a, b)
        active.discard(a)
        active.discard(b)
        for x in active:
            dist[(min(x, next_id), max(x, next_id))] = max(get(a, x), get(b, x))
        active.add(next_id)
        next_id += 1

    def walk(cid: int) -> list[int]:
        if cid < n:
            return [cid]
        a, b = children[cid]
        return walk(a) + walk(b)

    leaf_order = tuple(walk(next_id - 1)) if n > 1 else (0,)
    return Dendrogram(dmatrix.unit_ids, tuple(merges), leaf_order)


@dataclass(frozen=True)
class ClusterSolution:
    """A flat clustering: labels 1..k, one medoid per cluster.

    ``representatives`` maps labels to the medoid's series when the caller
    supplied the underlying series; it is empty otherwise.
    """

    k: int
    assignment: dict[str, int]
    medoid_ids: dict[int, str]
    representatives: dict[int, PanelSeries] = field(default_factory=dict)

    def members(self, label: int) -> list[str]:
        return sorted(u for u, lab in self.assignment.items() if lab == label)


def cut(
    dendrogram: Dendrogram,
    k: int,
    dmatrix: DistanceMatrix,
    series: "Mapping[str, PanelSeries] | None" = None,
) -> ClusterSolution:
    """Flat clustering with ``k`` groups: undo the last k-1 merges.

    Labels are assigned 1..k to the clusters ordered by their smallest unit
    id, making the labeling invariant to input order. The representative of
    a cluster is its medoid: the member with minimal summed distance to the
    rest of the cluster, ties broken by unit id.
    """
    n = dendrogram.n_leaves
    if not 2 <= k <= n:
        raise ValueError(f"k={k} outside [2, {n}]")
    if dmatrix.unit_ids != dendrogram.unit_ids:
        raise ValueError("distance matrix does not match dendrogram units")

    members: dict[int, list[int]] = {i: [i] for i in range(n)}
    next_id = n
    for a, b, _h in dendrogram.merges[: n - k]:
        members[next_id] = members.pop(a) + members.pop(b)
        next_id += 1

    ids = dendrogram.unit_ids
    clusters = sorted(
        (sorted(group) for group in members.values()),
        key=lambda g: min(ids[i] for i in g),
    )
    assignment: dict[str, int] = {}
    medoid_ids: dict[int, str] = {}
    representatives: dict[int, PanelSeries] = {}
    D = dmatrix.values
    for label, group in enumerate(clusters, start=1):
        for i in group:
            assignment[ids[i]] = label
        best = min(group, key=lambda i: (D[i, group].sum(), ids[i]))
        medoid_ids[label] = ids[best]
        if series is not None:
            representatives[label] = series[ids[best]]
    return ClusterSolution(k, assignment, medoid_ids, representatives)


def _medoid(D: np.ndarray, points: Sequence[int], ids: tuple[str, ...]) -> int:
    return min(points, key=lambda i: (D[i, points].sum(), ids[i]))


def validity_indices(
    dmatrix: DistanceMatrix, solution: ClusterSolution
) -> dict[str, float]:
    """The seven validity indices of a flat clustering, from distances only.

    Centroid-based indices (SF, CH, DB, DB*, COP) use cluster medoids as
    centers, and the global medoid as the overall center. Silhouette of a
    singleton cluster is 0 by convention. Dunn is the unnormalized variant:
    minimal single-linkage separation over maximal cluster diameter.
    """
    k = solution.k
    if k < 2:
        raise ValueError("validity indices need k >= 2")
    ids = dmatrix.unit_ids
    D = dmatrix.values
    n = len(ids)
    labels = [solution.assignment[u] for u in ids]
    groups: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    if len(groups) != k:
        raise ValueError("solution has empty clusters")

    medoid = {lab: _medoid(D, pts, ids) for lab, pts in groups.items()}
    global_medoid = _medoid(D, list(range(n)), ids)

    # Silhouette
    sil_values = []
    for i in range(n):
        own = groups[labels[i]]
        if len(own) == 1:
            sil_values.append(0.0)
            continue
        a = D[i, [j for j in own if j != i]].mean()
        b = min(
            D[i, pts].mean() for lab, pts in groups.items() if lab != labels[i]
        )
        denom = max(a, b)
        sil_values.append((b - a) / denom if denom > 0 else 0.0)
    sil = float(np.mean(sil_values))

    sizes = {lab: len(pts) for lab, pts in groups.items()}
    # Score Function
    bcd = sum(
        sizes[lab] * D[medoid[lab], global_medoid] for lab in groups
    ) / (n * k)
    wcd = sum(
        D[medoid[lab], pts].sum() / sizes[lab] for lab, pts in groups.items()
    )
    # saturates to its supremum once the inner exponent would overflow
    arg = bcd - wcd
    sf = 1.0 - 1.0 / math.exp(math.exp(arg)) if arg <= 6.5 else 1.0

    # Calinski-Harabasz (squared distances, medoid centers)
    between = sum(
        sizes[lab] * D[medoid[lab], global_medoid] ** 2 for lab in groups
    )
    within = sum(
        float((D[medoid[lab], pts] ** 2).sum()) for lab, pts in groups.items()
    )
    if within > 0:
        ch = (between / (k - 1)) / (within / (n - k))
    else:
        ch = math.inf if between > 0 else 0.0

    # Davies-Bouldin and DB*
    scatter = {
        lab: float(D[medoid[lab], pts].mean()) for lab, pts in groups.items()
    }
    lab_list = sorted(groups)
    db_terms = []
    dbstar_terms = []
    for la in lab_list:
        ratios = []
        numers = []
        seps = []
        for lb in lab_list:
            if lb == la:
                continue
            m = D[medoid[la], medoid[lb]]
            s = scatter[la] + scatter[lb]
            ratios.append(s / m if m > 0 else math.inf)
            numers.append(s)
            seps.append(m)
        db_terms.append(max(ratios))
        min_sep = min(seps)
        dbstar_terms.append(
            max(numers) / min_sep if min_sep > 0 else math.inf
        )
    db = float(np.mean(db_terms))
    dbstar = float(np.mean(dbstar_terms))

    # Dunn (unnormalized)
    min_between = math.inf
    for ai, la in enumerate(lab_list):
        for lb in lab_list[ai + 1 :]:
            block = D[np.ix_(groups[la], groups[lb])]
            min_between = min(min_between, float(block.min()))
    max_diam = 0.0
    for pts in groups.values():
        if len(pts) > 1:
            block = D[np.ix_(pts, pts)]
            max_diam = max(max_diam, float(block.max()))
    dunn = min_between / max_diam if max_diam > 0 else math.inf

    # COP: per-cluster cohesion over separation
    cop_sum = 0.0
    for lab, pts in groups.items():
        intra = float(D[medoid[lab], pts].mean())
        outside = [j for j in range(n) if labels[j] != lab]
        sep = min(float(D[np.ix_(pts, [j])].max()) for j in outside)
        cop_sum += sizes[lab] * (intra / sep if sep > 0 else math.inf)
    cop = cop_sum / n

    return {
        "Sil": sil,
        "SF": float(sf),
        "CH": float(ch),
        "DB": db,
        "DBstar": dbstar,
        "Dunn": float(dunn),
        "COP": float(cop),
    }
