"""Embedding distance, contrastive/triplet losses, surrogates and gradients.

Distances live on the unit sphere so every value is in [0, 2].  Gradients
of the distance are undefined at d = 0; anything below DIST_FLOOR raises
DistanceSingularity instead of fabricating a direction (attack loops catch
this and re-randomize).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .model import MlpParams, forward, forward_many, vjp_input
from .synth import Dataset, LabeledPoint

__all__ = [
    "DIST_FLOOR",
    "DistanceSingularity",
    "LossKind",
    "LossConfig",
    "Pair",
    "Triplet",
    "PerturbTarget",
    "embed_distance",
    "grad_distance",
    "contrastive_loss",
    "triplet_loss",
    "surrogate_contrastive",
    "surrogate_triplet",
    "loss_grad_component",
]

DIST_FLOOR = 1e-8


class DistanceSingularity(ValueError):
    """Gradient of the embedding distance requested at (numerically) zero distance."""


class LossKind(enum.Enum):
    CONTRASTIVE = "contrastive"
    TRIPLET = "triplet"


class PerturbTarget(enum.Enum):
    """Which component of a pair/triplet an operation acts on.

    OTHER is an alias of POSITIVE: the second component of a contrastive
    pair regardless of its label.
    """

    ANCHOR = 1
    POSITIVE = 2
    NEGATIVE = 3

    @classmethod
    def valid_for(cls, group) -> tuple["PerturbTarget", ...]:
        if isinstance(group, Triplet):
            return (cls.ANCHOR, cls.POSITIVE, cls.NEGATIVE)
        return (cls.ANCHOR, cls.POSITIVE)


PerturbTarget.OTHER = PerturbTarget.POSITIVE


@dataclass(frozen=True)
class LossConfig:
    kind: LossKind
    margin_alpha: float = 1.0
    hinge_negative: bool = True  # clamp the different-label contrastive term at 0

    def __post_init__(self):
        if self.margin_alpha <= 0:
            raise ValueError("margin_alpha must be > 0")


@dataclass(frozen=True)
class Pair:
    """A labeled two-sample group; carries both same- and different-label cases."""

    anchor: LabeledPoint
    other: LabeledPoint

    @property
    def same_label(self) -> bool:
        return self.anchor.label == self.other.label


@dataclass(frozen=True)
class Triplet:
    anchor: LabeledPoint
    positive: LabeledPoint
    negative: LabeledPoint

    def __post_init__(self):
        if self.positive.label != self.anchor.label:
            raise ValueError("positive must share the anchor's label")
        if self.negative.label == self.anchor.label:
            raise ValueError("negative must differ from the anchor's label")


def component(group, target: PerturbTarget) -> LabeledPoint:
    """The targeted component of a pair or triplet."""
    if target not in PerturbTarget.valid_for(group):
        raise ValueError(f"target {target.name} invalid for {type(group).__name__}")
    if isinstance(group, Triplet):
        return {
            PerturbTarget.ANCHOR: group.anchor,
            PerturbTarget.POSITIVE: group.positive,
            PerturbTarget.NEGATIVE: group.negative,
        }[target]
    return group.anchor if target is PerturbTarget.ANCHOR else group.other


def replace_component(group, target: PerturbTarget, x: np.ndarray):
    """Copy of the group with the targeted component's input replaced."""
    pt = LabeledPoint(x, component(group, target).label)
    if isinstance(group, Triplet):
        parts = {
            PerturbTarget.ANCHOR: "anchor",
            PerturbTarget.POSITIVE: "positive",
            PerturbTarget.NEGATIVE: "negative",
        }
        kwargs = {"anchor": group.anchor, "positive": group.positive, "negative": group.negative}
        kwargs[parts[target]] = pt
        return Triplet(**kwargs)
    if target is PerturbTarget.ANCHOR:
        return Pair(pt, group.other)
    return Pair(group.anchor, pt)


def _distance(e1: np.ndarray, e2: np.ndarray) -> float:
    diff = e1 - e2
    return float(np.sqrt(np.dot(diff, diff)))


def embed_distance(params: MlpParams, x1: np.ndarray, x2: np.ndarray) -> float:
    """l2 distance between the two embeddings; in [0, 2] on the sphere."""
    batch = forward_many(params, np.stack([np.asarray(x1, float), np.asarray(x2, float)]))
    return _distance(batch.embeddings[0], batch.embeddings[1])


class Wrt(enum.Enum):
    FIRST = 1
    SECOND = 2


def grad_distance(params: MlpParams, x1: np.ndarray, x2: np.ndarray, wrt: Wrt = Wrt.FIRST) -> np.ndarray:
    """Exact gradient of embed_distance w.r.t. one argument."""
    t1 = forward(params, np.asarray(x1, float))
    t2 = forward(params, np.asarray(x2, float))
    d = _distance(t1.embedding, t2.embedding)
    if d < DIST_FLOOR:
        raise DistanceSingularity("distance singularity")
    if wrt is Wrt.FIRST:
        return vjp_input(params, t1, (t1.embedding - t2.embedding) / d)
    return vjp_input(params, t2, (t2.embedding - t1.embedding) / d)


def contrastive_loss(params: MlpParams, cfg: LossConfig, pair: Pair) -> float:
    """d for same labels; [alpha - d]+ (or alpha - d unhinged) otherwise."""
    if cfg.kind is not LossKind.CONTRASTIVE:
        raise ValueError("config is not contrastive")
    d = embed_distance(params, pair.anchor.x, pair.other.x)
    if pair.same_label:
        return d
    raw = cfg.margin_alpha - d
    return max(raw, 0.0) if cfg.hinge_negative else raw


def triplet_loss(params: MlpParams, cfg: LossConfig, triplet: Triplet) -> float:
    """max(0, d(a,p) - d(a,n) + alpha); label validity is structural."""
    if cfg.kind is not LossKind.TRIPLET:
        raise ValueError("config is not triplet")
    batch = forward_many(
        params, np.stack([triplet.anchor.x, triplet.positive.x, triplet.negative.x])
    )
    d_ap = _distance(batch.embeddings[0], batch.embeddings[1])
    d_an = _distance(batch.embeddings[0], batch.embeddings[2])
    return max(0.0, d_ap - d_an + cfg.margin_alpha)


def surrogate_contrastive(
    params: MlpParams, cfg: LossConfig, point: LabeledPoint, dataset: Dataset
) -> float:
    """Mean contrastive loss of ``point`` against every dataset entry.

    The self term (same point present in the dataset) contributes exactly 0
    and is included.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    total = 0.0
    for other in dataset:
        total += contrastive_loss(params, cfg, Pair(point, other))
    return total / len(dataset)


def surrogate_triplet(
    params: MlpParams, cfg: LossConfig, point: LabeledPoint, dataset: Dataset
) -> float:
    """Mean triplet loss over all (same-label, different-label) partner pairs."""
    pos_idx = np.flatnonzero(dataset.y == point.label)
    neg_idx = np.flatnonzero(dataset.y != point.label)
    if pos_idx.size == 0 or neg_idx.size == 0:
        raise ValueError("degenerate class structure")
    total = 0.0
    for j in pos_idx:
        for k in neg_idx:
            total += triplet_loss(
                params, cfg, Triplet(point, dataset.point(int(j)), dataset.point(int(k)))
            )
    return total / (pos_idx.size * neg_idx.size)


def _hinge_active_triplet(cfg, d_ap, d_an) -> bool:
    return d_ap - d_an + cfg.margin_alpha > 0.0


def loss_grad_component(params: MlpParams, cfg: LossConfig, group, target: PerturbTarget) -> np.ndarray:
    """Exact gradient of the group loss w.r.t. the targeted component's input.

    Inactive hinges return a zero vector without touching any distance
    gradient; active branches propagate DistanceSingularity.
    """
    if target not in PerturbTarget.valid_for(group):
        raise ValueError(f"target {target.name} invalid for {type(group).__name__}")
    k = params.input_dim
    if isinstance(group, Pair):
        if cfg.kind is not LossKind.CONTRASTIVE:
            raise ValueError("pair groups need a contrastive config")
        xa, xo = group.anchor.x, group.other.x
        wrt = Wrt.FIRST if target is PerturbTarget.ANCHOR else Wrt.SECOND
        if group.same_label:
            return grad_distance(params, xa, xo, wrt)
        if cfg.hinge_negative:
            d = embed_distance(params, xa, xo)
            if cfg.margin_alpha - d <= 0.0:
                return np.zeros(k)
        return -grad_distance(params, xa, xo, wrt)
    # triplet
    if cfg.kind is not LossKind.TRIPLET:
        raise ValueError("triplet groups need a triplet config")
    xa, xp, xn = group.anchor.x, group.positive.x, group.negative.x
    d_ap = embed_distance(params, xa, xp)
    d_an = embed_distance(params, xa, xn)
    if not _hinge_active_triplet(cfg, d_ap, d_an):
        return np.zeros(k)
    if target is PerturbTarget.ANCHOR:
        return grad_distance(params, xa, xp, Wrt.FIRST) - grad_distance(params, xa, xn, Wrt.FIRST)
    if target is PerturbTarget.POSITIVE:
        return grad_distance(params, xa, xp, Wrt.SECOND)
    return -grad_distance(params, xa, xn, Wrt.SECOND)
