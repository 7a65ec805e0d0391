"""Nearest-anchor inference, R@1 / mAP@R metrics and robustness reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import MlpParams, forward_many, params_fingerprint
from .numerics import SeededRng, STREAM_TIEBREAK
from .synth import Dataset

__all__ = [
    "AnchorSet",
    "MetricsReport",
    "ShiftRecord",
    "nearest_anchor",
    "predict_label",
    "knn_indices",
    "recall_at_1",
    "map_at_r",
    "benign_metrics",
    "robust_metrics",
    "embedding_shift_report",
]

# Distances closer than this to the minimum count as tied for prediction.
TIE_TOL = 1e-12


@dataclass
class AnchorSet:
    """Labeled reference points with embeddings cached per parameter set."""

    x: np.ndarray
    labels: np.ndarray
    _cache_key: str | None = field(default=None, repr=False)
    _cache_emb: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.shape[0] == 0:
            raise ValueError("anchor set is empty")
        if self.labels.shape != (self.x.shape[0],):
            raise ValueError("one label per anchor required")

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "AnchorSet":
        return cls(dataset.x, dataset.y)

    def __len__(self) -> int:
        return self.x.shape[0]

    def embeddings(self, params: MlpParams) -> np.ndarray:
        key = params_fingerprint(params)
        if self._cache_key != key:
            self._cache_emb = forward_many(params, self.x).embeddings
            self._cache_key = key
        return self._cache_emb


@dataclass(frozen=True)
class MetricsReport:
    """Metrics of one (model, dataset, attack) evaluation."""

    r_at_1: float
    map_at_r: float
    n_evaluated: int
    attack: str  # "benign" or an attack descriptor
    attack_success_rate: float
    mean_shift: float
    max_shift: float

    def __post_init__(self):
        if not (0.0 <= self.r_at_1 <= 1.0 and 0.0 <= self.map_at_r <= 1.0):
            raise ValueError("metric fractions must lie in [0,1]")
        if self.n_evaluated <= 0:
            raise ValueError("n_evaluated must be positive")


@dataclass(frozen=True)
class ShiftRecord:
    """One row of the embedding-shift report."""

    index: int
    label: int
    benign_embedding: np.ndarray
    adversarial_embedding: np.ndarray
    shift: float
    nn_correct: bool


def _tie_break_argmin(distances: np.ndarray, rng: SeededRng) -> int:
    """Index of the minimal distance; ties within TIE_TOL resolved uniformly."""
    d_min = float(np.min(distances))
    tied = np.flatnonzero(distances <= d_min + TIE_TOL)
    if tied.size == 1:
        return int(tied[0])
    gen = rng.generator()
    return int(tied[gen.integers(0, tied.size)])


def nearest_anchor(params: MlpParams, anchors: AnchorSet, z_embedding: np.ndarray,
                   rng: SeededRng) -> int:
    """Anchor index of minimal embedding distance; random tie-break."""
    emb = anchors.embeddings(params)
    diff = emb - np.asarray(z_embedding, dtype=np.float64)
    d = np.sqrt(np.sum(diff * diff, axis=1))
    return _tie_break_argmin(d, rng)


def predict_label(params: MlpParams, anchors: AnchorSet, z: np.ndarray,
                  rng: SeededRng) -> int:
    """Label of the nearest anchor to f(z)."""
    z_emb = forward_many(params, np.asarray(z, dtype=np.float64)[None, :]).embeddings[0]
    return int(anchors.labels[nearest_anchor(params, anchors, z_emb, rng)])


def knn_indices(embeddings: np.ndarray, i: int, k: int) -> np.ndarray:
    """The k indices (excluding i) nearest to row i, distance ascending.

    Distance ties are broken by ascending index, so results are
    deterministic; the random tie-break is reserved for anchor prediction.
    """
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = embeddings.shape[0]
    if k > n - 1:
        raise ValueError(f"k={k} exceeds n-1={n - 1}")
    diff = embeddings - embeddings[i]
    d = np.sqrt(np.sum(diff * diff, axis=1))
    d[i] = np.inf
    order = np.lexsort((np.arange(n), d))
    return order[:k]


def _pairwise_distances(E: np.ndarray, F: np.ndarray | None = None) -> np.ndarray:
    # direct row-wise differences: bit-identical to per-pair norm computations,
    # so rankings agree exactly with naive implementations (a gram-matrix
    # shortcut rounds differently and can reorder near-ties)
    if F is None:
        F = E
    out = np.empty((E.shape[0], F.shape[0]))
    for i in range(E.shape[0]):
        diff = F - E[i]
        out[i] = np.sqrt(np.sum(diff * diff, axis=1))
    return out


def _loo_nearest(dist: np.ndarray) -> np.ndarray:
    """Per-row nearest column with the diagonal excluded, index tie-break."""
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    return np.argmin(d, axis=1)  # argmin takes the first minimum = lowest index


def recall_at_1(params: MlpParams, test_set: Dataset) -> float:
    """Fraction of points whose nearest other point shares their label."""
    if len(test_set) < 2:
        raise ValueError("R@1 needs at least 2 points")
    emb = forward_many(params, test_set.x).embeddings
    nn = _loo_nearest(_pairwise_distances(emb))
    return float(np.mean(test_set.y[nn] == test_set.y))


def _average_precision_at_r(sorted_hits: np.ndarray, r: int, gated: bool) -> float:
    """AP over the first r retrievals given a 0/1 hit vector in rank order.

    Accumulates precision terms sequentially in ascending rank so results
    are bit-identical to a straightforward loop implementation.
    """
    total = 0.0
    hits = 0
    for k in range(1, r + 1):
        hit = sorted_hits[k - 1] != 0.0
        hits += hit
        prec = hits / k
        if gated and not hit:
            prec = 0.0
        total += prec
    return total / r


def map_at_r(params: MlpParams, test_set: Dataset, gated: bool = False) -> float:
    """Mean over points of average precision at R_i (same-class count).

    The ungated default averages precision@k for every k <= R_i; gated=True
    only credits ranks that are themselves hits.  Singleton-class points
    (R_i = 0) are excluded from the average.
    """
    if len(test_set) < 2:
        raise ValueError("mAP@R needs at least 2 points")
    emb = forward_many(params, test_set.x).embeddings
    return _map_at_r_from_dist(_pairwise_distances(emb), test_set.y, test_set.y, gated)[0]


def _map_at_r_from_dist(dist, query_labels, gallery_labels, gated, exclude_diagonal=True):
    """(mAP@R, excluded-count) given a query-by-gallery distance matrix."""
    n_q = dist.shape[0]
    total = 0.0
    counted = 0
    excluded = 0
    cols = np.arange(dist.shape[1])
    for i in range(n_q):
        d = dist[i].copy()
        if exclude_diagonal:
            d[i] = np.inf
        r_i = int(np.sum((gallery_labels == query_labels[i]) & (cols != (i if exclude_diagonal else -1))))
        if r_i == 0:
            excluded += 1
            continue
        order = np.lexsort((cols, d))
        hits = (gallery_labels[order] == query_labels[i]).astype(np.float64)
        total += _average_precision_at_r(hits, r_i, gated)
        counted += 1
    if counted == 0:
        raise ValueError("mAP@R undefined: all points are in singleton classes")
    return total / counted, excluded


def benign_metrics(params: MlpParams, test_set: Dataset, gated: bool = False) -> MetricsReport:
    """Leave-one-out R@1 and mAP@R on unperturbed data."""
    return MetricsReport(
        r_at_1=recall_at_1(params, test_set),
        map_at_r=map_at_r(params, test_set, gated),
        n_evaluated=len(test_set),
        attack="benign",
        attack_success_rate=0.0,
        mean_shift=0.0,
        max_shift=0.0,
    )


def _attack_test_set(params, test_set, attack, rng):
    """Perturb every test point toward its nearest same-label other point."""
    from .attacks import max_distance_rows

    emb = forward_many(params, test_set.x).embeddings
    dist = _pairwise_distances(emb)
    np.fill_diagonal(dist, np.inf)
    same = test_set.y[None, :] == test_set.y[:, None]
    d_same = np.where(same, dist, np.inf)
    if np.any(~np.isfinite(np.min(d_same, axis=1))):
        raise ValueError("every point needs at least one same-label partner")
    nearest_pos = np.argmin(d_same, axis=1)
    refs = emb[nearest_pos]
    return max_distance_rows(params, test_set.x, refs, attack, rng, sign=1.0), emb


def robust_metrics(params: MlpParams, test_set: Dataset, attack, rng: SeededRng,
                   anchors_policy: str = "loo", gated: bool = False) -> MetricsReport:
    """Attack every test point, then rank perturbed queries against benign points.

    anchors_policy "loo" scores each perturbed point against all other
    unperturbed test points; predictions for the success rate reuse the
    nearest-anchor tie-break stream per point.
    """
    if anchors_policy != "loo":
        raise ValueError("only the leave-one-out anchors policy is implemented")
    if len(test_set) < 2:
        raise ValueError("robust metrics need at least 2 points")
    x_adv, emb = _attack_test_set(params, test_set, attack, rng.derive(1))
    emb_adv = forward_many(params, x_adv).embeddings
    dist_adv = _pairwise_distances(emb_adv, emb)
    y = test_set.y

    nn_adv = _loo_nearest(dist_adv)
    r1 = float(np.mean(y[nn_adv] == y))
    m_ap, _ = _map_at_r_from_dist(dist_adv, y, y, gated)

    dist_ben = _pairwise_distances(emb, emb)
    tie_rng = rng.stream(STREAM_TIEBREAK)
    successes = 0
    for i in range(len(test_set)):
        db = dist_ben[i].copy()
        da = dist_adv[i].copy()
        db[i] = np.inf
        da[i] = np.inf
        point_rng = tie_rng.derive(i)
        before = int(y[_tie_break_argmin(db, point_rng)])
        after = int(y[_tie_break_argmin(da, point_rng)])
        successes += before != after
    shifts = np.sqrt(np.sum((emb_adv - emb) ** 2, axis=1))
    return MetricsReport(
        r_at_1=r1,
        map_at_r=m_ap,
        n_evaluated=len(test_set),
        attack=attack.describe(),
        attack_success_rate=successes / len(test_set),
        mean_shift=float(np.mean(shifts)),
        max_shift=float(np.max(shifts)),
    )


def embedding_shift_report(params: MlpParams, points: Dataset, attack,
                           rng: SeededRng) -> list[ShiftRecord]:
    """Per-point benign/adversarial embeddings, shift distance and NN flag.

    These rows are the data behind embedding-space shift plots: the flag
    says whether the perturbed point's nearest unperturbed neighbor still
    shares its label.
    """
    if len(points) < 2:
        raise ValueError("shift report needs at least 2 points")
    x_adv, emb = _attack_test_set(params, points, attack, rng.derive(1))
    emb_adv = forward_many(params, x_adv).embeddings
    dist_adv = _pairwise_distances(emb_adv, emb)
    nn = _loo_nearest(dist_adv)
    shifts = np.sqrt(np.sum((emb_adv - emb) ** 2, axis=1))
    return [
        ShiftRecord(
            index=i,
            label=int(points.y[i]),
            benign_embedding=emb[i].copy(),
            adversarial_embedding=emb_adv[i].copy(),
            shift=float(shifts[i]),
            nn_correct=bool(points.y[nn[i]] == points.y[i]),
        )
        for i in range(len(points))
    ]
