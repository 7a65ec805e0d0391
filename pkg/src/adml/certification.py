"""Separation margins, Lipschitz robustness certificates, and event frequencies.

A point whose nearest anchor beats the runner-up by a margin delta keeps
its prediction under any input perturbation that moves embedding distances
by less than delta/2; combined with a Lipschitz bound L of the embedding
map this certifies every epsilon with L <= delta/(2*epsilon).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import AnchorSet
from .model import MlpParams, forward_many
from .numerics import Norm, SeededRng
from .synth import GaussianMixtureConfig, sample_class_points

__all__ = [
    "Certificate",
    "delta_separation",
    "certify_eps_robust",
    "empirical_event_frequency",
    "anchor_distance_stats",
]


@dataclass(frozen=True)
class Certificate:
    """Outcome of one epsilon-robustness certification."""

    point_index: int
    delta_separation: float
    lipschitz_bound_used: float  # effective bound after norm conversion and safety
    epsilon_certified: float
    certified: bool
    region_caveat: str = ""


def delta_separation(params: MlpParams, z: np.ndarray, anchors: AnchorSet) -> float:
    """Margin d2 - d1 between the runner-up and nearest anchor distances."""
    if len(anchors) < 2:
        raise ValueError("delta separation needs at least 2 anchors")
    z_emb = forward_many(params, np.asarray(z, dtype=np.float64)[None, :]).embeddings[0]
    diff = anchors.embeddings(params) - z_emb
    d = np.sqrt(np.sum(diff * diff, axis=1))
    d1, d2 = np.partition(d, 1)[:2]
    return float(d2 - d1)


def certify_eps_robust(
    params: MlpParams,
    z: np.ndarray,
    anchors: AnchorSet,
    epsilon: float,
    input_norm: Norm,
    lipschitz_l2: float,
    safety_factor: float = 2.0,
    point_index: int = -1,
) -> Certificate:
    """Certificate that no input perturbation of size epsilon flips the anchor.

    ``lipschitz_l2`` bounds the embedding map w.r.t. the l2 input metric
    (e.g. L_norm from lipschitz_upper_bound).  For an LINF input metric the
    bound is converted via |delta|_2 <= sqrt(k)*|delta|_inf.  The default
    safety factor 2 guards against the certified ball leaving the region
    where the normalization-layer bound is valid.
    """
    if lipschitz_l2 <= 0:
        raise ValueError("Lipschitz bound must be > 0")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if safety_factor < 1.0:
        raise ValueError("safety_factor must be >= 1")
    z = np.asarray(z, dtype=np.float64)
    l_eff = lipschitz_l2 * safety_factor
    caveat = ""
    if input_norm is Norm.LINF:
        l_eff *= np.sqrt(z.size)
    delta = delta_separation(params, z, anchors)
    if delta > 0.0:
        eps_certified = delta / (2.0 * l_eff)
    else:
        eps_certified = 0.0
    certified = delta > 0.0 and l_eff <= delta / (2.0 * epsilon)
    if certified and safety_factor == 1.0:
        caveat = "normalization bound assumed valid on the certified ball"
    return Certificate(
        point_index=point_index,
        delta_separation=delta,
        lipschitz_bound_used=float(l_eff),
        epsilon_certified=float(eps_certified),
        certified=certified,
        region_caveat=caveat,
    )


def empirical_event_frequency(
    params: MlpParams,
    mixture: GaussianMixtureConfig,
    a_pos: np.ndarray,
    a_neg: np.ndarray,
    n_samples: int,
    rng: SeededRng,
    positive_class: int = 0,
) -> float:
    """Monte-Carlo frequency of fresh positive-class samples landing nearer
    the wrong anchor than the right one (ties count as the bad event)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    xs = sample_class_points(mixture, positive_class, n_samples, rng)
    emb = forward_many(params, xs).embeddings
    refs = forward_many(
        params, np.stack([np.asarray(a_pos, float), np.asarray(a_neg, float)])
    ).embeddings
    d_pos = np.sqrt(np.sum((emb - refs[0]) ** 2, axis=1))
    d_neg = np.sqrt(np.sum((emb - refs[1]) ** 2, axis=1))
    return float(np.mean(d_neg <= d_pos))


def anchor_distance_stats(
    params: MlpParams,
    mixture: GaussianMixtureConfig,
    anchor: np.ndarray,
    n_samples: int,
    rng: SeededRng,
    sample_class: int = 0,
) -> tuple[float, float]:
    """(mean, std) of embedding distances from fresh class samples to an anchor."""
    xs = sample_class_points(mixture, sample_class, n_samples, rng)
    emb = forward_many(params, xs).embeddings
    ref = forward_many(params, np.asarray(anchor, float)[None, :]).embeddings[0]
    d = np.sqrt(np.sum((emb - ref) ** 2, axis=1))
    return float(np.mean(d)), float(np.std(d))
