"""Cosine-distance ranking, medR / R@K, subset sampling and late fusion."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

PROTOCOLS = ("CAR", "CAR_PLUS", "CAR_PLUS_PLUS")
PROTOCOL_FACTORS = {"CAR": 1, "CAR_PLUS": 2, "CAR_PLUS_PLUS": 3}
DIRECTIONS = ("i2r", "r2i")
RECALL_KS = (1, 5, 10)

_PROTOCOL_ALIASES = {
    "car": "CAR", "car+": "CAR_PLUS", "car++": "CAR_PLUS_PLUS",
    "car_plus": "CAR_PLUS", "car_plus_plus": "CAR_PLUS_PLUS",
}


def protocol_tag(name: str) -> str:
    """Normalize ``car``, ``car+``, ``CAR_PLUS`` ... to the canonical tag."""
    if name in PROTOCOLS:
        return name
    try:
        return _PROTOCOL_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown protocol {name!r}") from None


@dataclass
class DistanceMatrix:
    """Query-by-candidate distances plus the true candidate index per query."""

    values: np.ndarray
    query_ids: Sequence
    candidate_ids: Sequence
    truth: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.truth = np.asarray(self.truth, dtype=np.int64)
        q, c = self.values.shape
        if len(self.query_ids) != q or len(self.candidate_ids) != c or len(self.truth) != q:
            raise ValueError("ids/truth do not match the distance matrix shape")
        if len(set(self.truth.tolist())) != q:
            raise ValueError("truth mapping must be injective")

    @classmethod
    def aligned(cls, values: np.ndarray, ids: Optional[Sequence] = None) -> "DistanceMatrix":
        """Square matrix where query ``i`` matches candidate ``i``."""
        n = len(values)
        ids = list(range(n)) if ids is None else list(ids)
        return cls(values, ids, ids, np.arange(n))

    def restrict(self, index: np.ndarray) -> "DistanceMatrix":
        """Sub-matrix over aligned pairs ``index`` (queries and candidates alike)."""
        index = np.asarray(index)
        ids = [self.query_ids[i] for i in index]
        return DistanceMatrix(self.values[np.ix_(index, index)], ids,
                              [self.candidate_ids[i] for i in index], np.arange(len(index)))


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    ok = norms >= 1e-12
    return np.where(ok, x / np.where(ok, norms, 1.0), 0.0)


def cosine_distances(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """``1 - cos``; zero-norm rows use similarity 0 (distance 1)."""
    queries = np.asarray(queries, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    if queries.size == 0 or candidates.size == 0:
        raise ValueError("distance matrix needs non-empty queries and candidates")
    if queries.ndim != 2 or candidates.ndim != 2 or queries.shape[1] != candidates.shape[1]:
        raise ValueError(f"dimension mismatch: {queries.shape} vs {candidates.shape}")
    sim = _unit_rows(queries) @ _unit_rows(candidates).T
    return np.clip(1.0 - sim, 0.0, 2.0)


def distance_matrix(queries: np.ndarray, candidates: np.ndarray,
                    query_ids: Optional[Sequence] = None,
                    candidate_ids: Optional[Sequence] = None,
                    truth: Optional[np.ndarray] = None) -> DistanceMatrix:
    values = cosine_distances(queries, candidates)
    q, c = values.shape
    query_ids = list(range(q)) if query_ids is None else list(query_ids)
    candidate_ids = list(range(c)) if candidate_ids is None else list(candidate_ids)
    truth = np.arange(q) if truth is None else truth
    return DistanceMatrix(values, query_ids, candidate_ids, truth)


def fuse(protocol: str, dist_ir: DistanceMatrix, dist_id: Optional[DistanceMatrix] = None,
         dist_sr: Optional[DistanceMatrix] = None) -> DistanceMatrix:
    """Late fusion by elementwise product of the protocol's distance factors.

    The caller builds each factor for the retrieval direction at hand; see
    :func:`direction_factors`.
    """
    tag = protocol_tag(protocol)
    factors = [dist_ir]
    if tag in ("CAR_PLUS", "CAR_PLUS_PLUS"):
        if dist_id is None:
            raise ValueError(f"{tag} requires the description distance factor")
        factors.append(dist_id)
    if tag == "CAR_PLUS_PLUS":
        if dist_sr is None:
            raise ValueError(f"{tag} requires the segment distance factor")
        factors.append(dist_sr)
    values = factors[0].values.copy()
    for f in factors[1:]:
        if f.values.shape != values.shape or not np.array_equal(f.truth, dist_ir.truth):
            raise ValueError("fusion factors are not aligned")
        values = values * f.values
    return DistanceMatrix(values, dist_ir.query_ids, dist_ir.candidate_ids, dist_ir.truth)


def direction_factors(direction: str, image: np.ndarray, recipe: np.ndarray,
                      description: Optional[np.ndarray] = None,
                      segments: Optional[np.ndarray] = None, ids: Optional[Sequence] = None):
    """Aligned distance factors ``(ir, id, sr)`` for one retrieval direction.

    image->recipe: ``d(V_q, R_c)``, ``d(V_q, D_c)``, ``d(S_q, R_c)``.
    recipe->image: ``d(R_q, V_c)``, ``d(D_q, V_c)``, ``d(R_q, S_c)``.
    Missing modalities give ``None`` factors.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")

    def dm(q, c):
        return None if q is None or c is None else DistanceMatrix.aligned(cosine_distances(q, c), ids)

    if direction == "i2r":
        return dm(image, recipe), dm(image, description), dm(segments, recipe)
    return dm(recipe, image), dm(description, image), dm(recipe, segments)


def rank_of_truth(dm: DistanceMatrix, query: int) -> int:
    """1 + candidates strictly closer, ties broken by candidate index."""
    row = dm.values[query]
    t = int(dm.truth[query])
    if not 0 <= t < row.size:
        raise ValueError(f"query {query} has no truth candidate")
    closer = np.count_nonzero(row < row[t])
    tied_before = np.count_nonzero(row[:t] == row[t])
    return int(1 + closer + tied_before)


def ranks(dm: DistanceMatrix) -> np.ndarray:
    v = dm.values
    q = np.arange(v.shape[0])
    truth_d = v[q, dm.truth][:, None]
    before = np.arange(v.shape[1])[None, :] < dm.truth[:, None]
    return 1 + np.count_nonzero(v < truth_d, axis=1) + np.count_nonzero((v == truth_d) & before, axis=1)


@dataclass
class Metrics:
    medr: float
    r1: float
    r5: float
    r10: float

    def as_dict(self) -> dict:
        return {"medR": self.medr, "R@1": self.r1, "R@5": self.r5, "R@10": self.r10}


def metrics_from_ranks(r: np.ndarray) -> Metrics:
    r = np.asarray(r)
    return Metrics(float(np.median(r)), *(float(np.mean(r <= k)) for k in RECALL_KS))


def metrics(dm: DistanceMatrix) -> Metrics:
    return metrics_from_ranks(ranks(dm))


@dataclass
class RetrievalReport:
    direction: str
    protocol: str
    subset_size: int
    seed: int
    per_subset: list = field(default_factory=list)

    @property
    def mean(self) -> Metrics:
        keys = ("medr", "r1", "r5", "r10")
        return Metrics(*(float(np.mean([getattr(m, k) for m in self.per_subset])) for k in keys))

    def rows(self):
        """Flat (direction, protocol, metric, subset, value) rows, means last."""
        out = []
        for i, m in enumerate(self.per_subset):
            for name, value in m.as_dict().items():
                out.append((self.direction, self.protocol, name, str(i), value))
        for name, value in self.mean.as_dict().items():
            out.append((self.direction, self.protocol, name, "mean", value))
        return out


def subset_indices(n: int, subset_size: int, n_subsets: int, seed: int) -> list[np.ndarray]:
    if subset_size > n:
        raise ValueError(f"subset size {subset_size} exceeds corpus size {n}")
    if subset_size < 1 or n_subsets < 1:
        raise ValueError("subset size and subset count must be positive")
    rng = np.random.default_rng(seed)
    return [np.sort(rng.choice(n, size=subset_size, replace=False)) for _ in range(n_subsets)]


def subset_protocol(dm: DistanceMatrix, subset_size: int, n_subsets: int = 10, seed: int = 0,
                    direction: str = "i2r", protocol: str = "CAR") -> RetrievalReport:
    """Metrics within ``n_subsets`` random subsets of aligned pairs, plus their mean.

    ``dm`` must be square with query ``i`` matching candidate ``i``; each
    subset restricts queries and candidates to the same sampled pairs.
    """
    n = dm.values.shape[0]
    if dm.values.shape[1] != n or not np.array_equal(dm.truth, np.arange(n)):
        raise ValueError("subset protocol needs an aligned square distance matrix")
    report = RetrievalReport(direction, protocol_tag(protocol), subset_size, seed)
    for index in subset_indices(n, subset_size, n_subsets, seed):
        report.per_subset.append(metrics(dm.restrict(index)))
    return report
