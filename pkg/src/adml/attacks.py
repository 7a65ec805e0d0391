"""Perturbation generators: FGSM, R+FGSM, PGD, lp-clipped CW and their drivers.

Every attack maximizes a scalar objective of one perturbed input over an
lp ball intersected with the [0,1]^k input box.  Objectives come in three
shapes: a pair/triplet loss as a function of one component, distance to a
fixed reference embedding (test-time and targeted attacks), and distance
to the point's own benign embedding (embedding-shift attack).

All drivers operate row-wise on matrices so whole test sets and training
batches are perturbed in a handful of BLAS calls; the per-sample entry
points are single-row instances of the same code.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .losses import (
    DIST_FLOOR,
    DistanceSingularity,
    LossConfig,
    LossKind,
    Pair,
    PerturbTarget,
    Triplet,
    component,
    replace_component,
)
from .model import MlpParams, forward_many, forward_many_masked, vjp_input_many
from .numerics import Norm, SeededRng, project_ball_rows

if TYPE_CHECKING:  # pragma: no cover
    from .evaluation import AnchorSet
    from .synth import LabeledPoint

__all__ = [
    "AttackMethod",
    "AttackConfig",
    "AttackDegenerate",
    "fgsm_perturb",
    "rfgsm_perturb",
    "pgd_perturb",
    "cw_perturb",
    "inner_max",
    "inner_max_many",
    "test_time_attack",
    "targeted_attack",
    "attack_success",
    "targeted_success",
    "embedding_shift_attack",
    "max_distance_rows",
]


class AttackMethod(enum.Enum):
    FGSM = "fgsm"
    RFGSM = "rfgsm"
    PGD = "pgd"
    CW = "cw"


class AttackDegenerate(RuntimeError):
    """Every iteration of an attack hit a distance singularity."""


@dataclass(frozen=True)
class AttackConfig:
    """Declarative description of one attack run."""

    method: AttackMethod
    norm: Norm = Norm.LINF
    epsilon: float = 0.01
    iterations: int = 5
    step_size: float | None = None  # None resolves to the method default
    random_init: bool = True
    cw_lambda: float = 0.1
    cw_lr: float = 0.01

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.method in (AttackMethod.PGD, AttackMethod.CW) and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.step_size is not None and self.step_size < 0:
            raise ValueError("step_size must be >= 0")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.method is AttackMethod.FGSM:
            return self.epsilon
        if self.method is AttackMethod.RFGSM:
            return 0.25 * self.epsilon
        return 2.0 * self.epsilon / self.iterations  # PGD

    def describe(self) -> str:
        return f"{self.method.value}-{self.norm.value}-eps{self.epsilon:g}"


# ---------------------------------------------------------------------------
# Row-wise ascent objectives


class _RowObjective:
    """value_grad(X) -> (values, grads, singular_mask) for row iterates X."""

    # Group-loss objectives treat a persistent singularity as an error; the
    # distance objectives sit at their global minimum when d = 0, so the
    # one-shot methods fall back to sign(0) = 0 there instead of failing.
    singular_is_error = True

    def value_grad(self, X: np.ndarray):  # pragma: no cover - interface
        raise NotImplementedError


def _dist_rows(E: np.ndarray, F: np.ndarray) -> np.ndarray:
    diff = E - F
    return np.sqrt(np.sum(diff * diff, axis=1))


class _PairLossObjective(_RowObjective):
    """Contrastive loss of n pairs as a function of one varying component."""

    def __init__(self, params, cfg: LossConfig, fixed_embeddings, same_label):
        self.params = params
        self.cfg = cfg
        self.e_fixed = fixed_embeddings
        self.same = np.asarray(same_label, dtype=bool)

    def value_grad(self, X):
        batch, dead = forward_many_masked(self.params, X)
        e = batch.embeddings
        d = _dist_rows(e, self.e_fixed)
        singular = (d < DIST_FLOOR) | dead
        alpha = self.cfg.margin_alpha
        values = np.where(self.same, d, alpha - d)
        sign = np.where(self.same, 1.0, -1.0)
        if self.cfg.hinge_negative:
            inactive = (~self.same) & (alpha - d <= 0.0)
            values = np.where(inactive, 0.0, values)
            sign = np.where(inactive, 0.0, sign)
        safe_d = np.where(singular, 1.0, d)
        cot = (e - self.e_fixed) / safe_d[:, None] * sign[:, None]
        cot[singular] = 0.0
        grads = vjp_input_many(self.params, batch, cot)
        # rows with an inactive hinge have a genuine zero gradient, not a
        # singularity
        singular = singular & (sign != 0.0)
        return values, grads, singular


class _TripletLossObjective(_RowObjective):
    """Triplet loss of n triplets as a function of one varying component."""

    def __init__(self, params, cfg, target, e_first, e_second):
        # target ANCHOR:   varying anchor, e_first = positive, e_second = negative
        # target POSITIVE: varying positive, e_first = anchor (negative fixed dist)
        # target NEGATIVE: varying negative, e_first = anchor (positive fixed dist)
        self.params = params
        self.cfg = cfg
        self.target = target
        self.e_first = e_first
        self.e_second = e_second

    def value_grad(self, X):
        batch, dead = forward_many_masked(self.params, X)
        e = batch.embeddings
        alpha = self.cfg.margin_alpha
        if self.target is PerturbTarget.ANCHOR:
            d_ap = _dist_rows(e, self.e_first)
            d_an = _dist_rows(e, self.e_second)
            singular = (d_ap < DIST_FLOOR) | (d_an < DIST_FLOOR) | dead
            raw = d_ap - d_an + alpha
            active = raw > 0.0
            values = np.where(active, raw, 0.0)
            cot = (e - self.e_first) / np.where(d_ap < DIST_FLOOR, 1.0, d_ap)[:, None]
            cot -= (e - self.e_second) / np.where(d_an < DIST_FLOOR, 1.0, d_an)[:, None]
        else:
            d_var = _dist_rows(e, self.e_first)  # distance to the anchor
            d_fix = self.e_second  # precomputed scalar distances, shape (n,)
            singular = (d_var < DIST_FLOOR) | dead
            if self.target is PerturbTarget.POSITIVE:
                raw = d_var - d_fix + alpha
                sign = 1.0
            else:
                raw = d_fix - d_var + alpha
                sign = -1.0
            active = raw > 0.0
            values = np.where(active, raw, 0.0)
            cot = sign * (e - self.e_first) / np.where(singular, 1.0, d_var)[:, None]
        cot = cot * active[:, None].astype(float)
        cot[singular] = 0.0
        grads = vjp_input_many(self.params, batch, cot)
        singular = singular & active
        return values, grads, singular


class _DistanceObjective(_RowObjective):
    """sign * d(f(x_i), e_ref_i) per row; sign -1 turns ascent into descent."""

    singular_is_error = False

    def __init__(self, params, ref_embeddings, sign: float = 1.0):
        self.params = params
        self.e_ref = ref_embeddings
        self.sign = sign

    def value_grad(self, X):
        batch, dead = forward_many_masked(self.params, X)
        e = batch.embeddings
        d = _dist_rows(e, self.e_ref)
        singular = (d < DIST_FLOOR) | dead
        cot = self.sign * (e - self.e_ref) / np.where(singular, 1.0, d)[:, None]
        cot[singular] = 0.0
        grads = vjp_input_many(self.params, batch, cot)
        return self.sign * d, grads, singular


# ---------------------------------------------------------------------------
# Box/ball geometry and per-row randomness


def _project_box_ball(X0, X_cand, norm: Norm, eps: float) -> np.ndarray:
    """Pull candidate rows into B_p(x0, eps) intersected with [0,1]^k."""
    if norm is Norm.LINF:
        lo = np.maximum(X0 - eps, 0.0)
        hi = np.minimum(X0 + eps, 1.0)
        return np.clip(X_cand, lo, hi)
    delta = project_ball_rows(X_cand - X0, norm, eps)
    return np.clip(X0 + delta, 0.0, 1.0)


def _row_generators(rng: SeededRng, n: int):
    return [rng.derive(i).generator() for i in range(n)]


def _random_deltas(gens, k: int, norm: Norm, eps: float) -> np.ndarray:
    """Per-row uniform draw inside the ball, one sub-stream per row."""
    deltas = np.empty((len(gens), k))
    for i, gen in enumerate(gens):
        if norm is Norm.LINF:
            deltas[i] = gen.uniform(-eps, eps, size=k)
        else:
            direction = gen.standard_normal(k)
            nrm = np.sqrt(np.dot(direction, direction))
            if nrm == 0.0:
                direction = np.ones(k)
                nrm = np.sqrt(float(k))
            radius = eps * gen.uniform() ** (1.0 / k)
            deltas[i] = direction / nrm * radius
    return deltas


def _ascent_direction(grads: np.ndarray, norm: Norm, step: float) -> np.ndarray:
    if norm is Norm.LINF:
        return step * np.sign(grads)
    norms = np.sqrt(np.sum(grads * grads, axis=1))
    safe = np.where(norms == 0.0, 1.0, norms)
    return step * grads / safe[:, None]


# ---------------------------------------------------------------------------
# Row-wise attack drivers


def _fgsm_rows(objective, X0, attack: AttackConfig, rng: SeededRng, strict: bool = True) -> np.ndarray:
    if attack.norm is not Norm.LINF:
        raise ValueError("FGSM is defined for the LINF ball")
    if attack.epsilon == 0.0:
        return X0.copy()
    _, grads, singular = objective.value_grad(X0)
    if np.any(singular):
        # one jittered retry for rows that started exactly at a singularity
        gens = _row_generators(rng, X0.shape[0])
        X_retry = X0.copy()
        for i in np.flatnonzero(singular):
            X_retry[i] = np.clip(X0[i] + gens[i].uniform(-1e-6, 1e-6, X0.shape[1]), 0.0, 1.0)
        _, grads2, singular2 = objective.value_grad(X_retry)
        if np.any(singular & singular2) and strict and objective.singular_is_error:
            raise DistanceSingularity("distance singularity")
        grads = np.where(singular[:, None], grads2, grads)
        grads[singular & singular2] = 0.0
    step = attack.resolved_step_size
    return _project_box_ball(X0, X0 + step * np.sign(grads), attack.norm, attack.epsilon)


def _rfgsm_rows(objective, X0, attack: AttackConfig, rng: SeededRng, strict: bool = True) -> np.ndarray:
    if attack.norm is not Norm.LINF:
        raise ValueError("R+FGSM is defined for the LINF ball")
    if attack.epsilon == 0.0:
        return X0.copy()
    gens = _row_generators(rng, X0.shape[0])
    deltas = _random_deltas(gens, X0.shape[1], attack.norm, attack.epsilon)
    X1 = _project_box_ball(X0, X0 + deltas, attack.norm, attack.epsilon)
    _, grads, singular = objective.value_grad(X1)
    if np.any(singular):
        for i in np.flatnonzero(singular):
            X1[i] = _project_box_ball(
                X0[i : i + 1],
                X0[i : i + 1] + gens[i].uniform(-attack.epsilon, attack.epsilon, X0.shape[1]),
                attack.norm,
                attack.epsilon,
            )[0]
        _, grads2, singular2 = objective.value_grad(X1)
        if np.any(singular & singular2) and strict and objective.singular_is_error:
            raise DistanceSingularity("distance singularity")
        grads = np.where(singular[:, None], grads2, grads)
        grads[singular & singular2] = 0.0
        if not strict:
            X1[singular & singular2] = X0[singular & singular2]
    step = attack.resolved_step_size
    return _project_box_ball(X0, X1 + step * np.sign(grads), attack.norm, attack.epsilon)


def _pgd_rows(objective, X0, attack: AttackConfig, rng: SeededRng, strict: bool = True) -> np.ndarray:
    if attack.epsilon == 0.0:
        return X0.copy()
    n, k = X0.shape
    gens = _row_generators(rng, n)
    if attack.random_init:
        deltas = _random_deltas(gens, k, attack.norm, attack.epsilon)
        X = _project_box_ball(X0, X0 + deltas, attack.norm, attack.epsilon)
    else:
        X = X0.copy()
    step = attack.resolved_step_size
    ever_ok = np.zeros(n, dtype=bool)
    for _ in range(attack.iterations):
        _, grads, singular = objective.value_grad(X)
        ever_ok |= ~singular
        if np.any(singular):
            # restart singular rows at a fresh random point instead of stepping
            fresh = _random_deltas([gens[i] for i in np.flatnonzero(singular)], k,
                                   attack.norm, attack.epsilon)
            X[singular] = _project_box_ball(
                X0[singular], X0[singular] + fresh, attack.norm, attack.epsilon
            )
            grads[singular] = 0.0
        X = _project_box_ball(
            X0, X + _ascent_direction(grads, attack.norm, step), attack.norm, attack.epsilon
        )
    if np.any(~ever_ok):
        if strict and objective.singular_is_error:
            raise AttackDegenerate("attack degenerate")
        X[~ever_ok] = X0[~ever_ok]
    return X


def _cw_rows(objective, X0, attack: AttackConfig, rng: SeededRng, strict: bool = True) -> np.ndarray:
    """First-order CW adaptation: ascend loss - lambda*|delta|_2^2 with ADAM,
    projecting to the ball and the input box after every step."""
    if attack.epsilon == 0.0:
        return X0.copy()
    n, k = X0.shape
    gens = _row_generators(rng, n)
    delta = np.zeros((n, k))
    m = np.zeros((n, k))
    v = np.zeros((n, k))
    b1, b2, eps8 = 0.9, 0.999, 1e-8
    lam, lr = attack.cw_lambda, attack.cw_lr
    ever_ok = np.zeros(n, dtype=bool)
    for t in range(1, attack.iterations + 1):
        _, grads, singular = objective.value_grad(X0 + delta)
        ever_ok |= ~singular
        if np.any(singular):
            fresh = _random_deltas([gens[i] for i in np.flatnonzero(singular)], k,
                                   attack.norm, attack.epsilon)
            delta[singular] = _project_box_ball(
                X0[singular], X0[singular] + fresh, attack.norm, attack.epsilon
            ) - X0[singular]
            grads[singular] = 0.0
        g = grads - 2.0 * lam * delta
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        delta = delta + lr * m_hat / (np.sqrt(v_hat) + eps8)
        delta = _project_box_ball(X0, X0 + delta, attack.norm, attack.epsilon) - X0
    if np.any(~ever_ok):
        if strict and objective.singular_is_error:
            raise AttackDegenerate("attack degenerate")
        X[~ever_ok] = X0[~ever_ok]
    return X0 + delta


_DRIVERS = {
    AttackMethod.FGSM: _fgsm_rows,
    AttackMethod.RFGSM: _rfgsm_rows,
    AttackMethod.PGD: _pgd_rows,
    AttackMethod.CW: _cw_rows,
}


def _run_rows(objective, X0, attack: AttackConfig, rng: SeededRng,
              strict: bool = True) -> np.ndarray:
    X0 = np.atleast_2d(np.asarray(X0, float))
    X = _DRIVERS[attack.method](objective, X0, attack, rng, strict)
    # never hand back an iterate the model cannot embed; the original
    # component is always evaluable
    _, dead = forward_many_masked(objective.params, X)
    if np.any(dead):
        X[dead] = X0[dead]
    return X


# ---------------------------------------------------------------------------
# Group-loss attacks (training-time inner maximization)


def _group_objective(params, cfg: LossConfig, groups, target: PerturbTarget):
    """Build the row objective for a homogeneous list of groups."""
    if isinstance(groups[0], Pair):
        if cfg.kind is not LossKind.CONTRASTIVE:
            raise ValueError("pair groups need a contrastive config")
        fixed_target = (
            PerturbTarget.POSITIVE if target is PerturbTarget.ANCHOR else PerturbTarget.ANCHOR
        )
        fixed = np.stack([component(g, fixed_target).x for g in groups])
        e_fixed = forward_many(params, fixed).embeddings
        same = np.array([g.same_label for g in groups])
        return _PairLossObjective(params, cfg, e_fixed, same)
    if cfg.kind is not LossKind.TRIPLET:
        raise ValueError("triplet groups need a triplet config")
    if target is PerturbTarget.ANCHOR:
        e_pos = forward_many(params, np.stack([g.positive.x for g in groups])).embeddings
        e_neg = forward_many(params, np.stack([g.negative.x for g in groups])).embeddings
        return _TripletLossObjective(params, cfg, target, e_pos, e_neg)
    e_anchor = forward_many(params, np.stack([g.anchor.x for g in groups])).embeddings
    if target is PerturbTarget.POSITIVE:
        other = forward_many(params, np.stack([g.negative.x for g in groups])).embeddings
    else:
        other = forward_many(params, np.stack([g.positive.x for g in groups])).embeddings
    d_fixed = _dist_rows(e_anchor, other)
    return _TripletLossObjective(params, cfg, target, e_anchor, d_fixed)


def inner_max_many(params, cfg: LossConfig, groups, target: PerturbTarget,
                   attack: AttackConfig, rng: SeededRng, strict: bool = True):
    """Perturb the target component of each group; returns new groups.

    Row i uses the sub-streams of rng.derive(i), so results do not depend
    on how groups are batched together.  With strict=False a group whose
    loss is flat across the whole ball (persistent distance singularity)
    keeps its component unperturbed instead of raising; the unperturbed
    point is then itself a maximizer.
    """
    if not groups:
        return []
    for g in groups:
        if target not in PerturbTarget.valid_for(g):
            raise ValueError(f"target {target.name} invalid for {type(g).__name__}")
    if attack.epsilon == 0.0:
        return list(groups)
    X0 = np.stack([component(g, target).x for g in groups])
    objective = _group_objective(params, cfg, groups, target)
    X_adv = _run_rows(objective, X0, attack, rng, strict)
    return [replace_component(g, target, X_adv[i].copy()) for i, g in enumerate(groups)]


def inner_max(params, cfg: LossConfig, group, target: PerturbTarget,
              attack: AttackConfig, rng: SeededRng):
    """Single-group inner maximization; see inner_max_many."""
    return inner_max_many(params, cfg, [group], target, attack, rng)[0]


def _single_component_attack(params, cfg, group, target, attack, rng, method):
    forced = AttackConfig(
        method=method,
        norm=attack.norm,
        epsilon=attack.epsilon,
        iterations=attack.iterations,
        step_size=attack.step_size,
        random_init=attack.random_init,
        cw_lambda=attack.cw_lambda,
        cw_lr=attack.cw_lr,
    )
    perturbed = inner_max(params, cfg, group, target, forced, rng)
    return component(perturbed, target).x


def fgsm_perturb(params, cfg, group, target, attack, rng: SeededRng) -> np.ndarray:
    """x_r + eps*sign(grad loss), clamped to the ball and input box."""
    return _single_component_attack(params, cfg, group, target, attack, rng, AttackMethod.FGSM)


def rfgsm_perturb(params, cfg, group, target, attack, rng: SeededRng) -> np.ndarray:
    """Random start in the ball, then one sign step of the resolved size."""
    return _single_component_attack(params, cfg, group, target, attack, rng, AttackMethod.RFGSM)


def pgd_perturb(params, cfg, group, target, attack, rng: SeededRng) -> np.ndarray:
    """Iterated projected gradient ascent on the group loss."""
    return _single_component_attack(params, cfg, group, target, attack, rng, AttackMethod.PGD)


def cw_perturb(params, cfg, group, target, attack, rng: SeededRng) -> np.ndarray:
    """Penalized first-order CW adaptation (see _cw_rows)."""
    return _single_component_attack(params, cfg, group, target, attack, rng, AttackMethod.CW)


# ---------------------------------------------------------------------------
# Test-time attacks against an anchor set


def max_distance_rows(params, X0, ref_embeddings, attack, rng, sign: float = 1.0):
    """Push rows of X0 as far from (sign=+1) or close to (-1) reference embeddings."""
    objective = _DistanceObjective(params, np.atleast_2d(ref_embeddings), sign)
    return _run_rows(objective, X0, attack, rng)


def _nearest_with_label(params, anchors: "AnchorSet", z_emb: np.ndarray, label: int) -> int:
    labels = anchors.labels
    idx = np.flatnonzero(labels == label)
    if idx.size == 0:
        raise ValueError(f"no anchor with label {label}")
    emb = anchors.embeddings(params)[idx]
    d = _dist_rows(emb, z_emb[None, :].repeat(idx.size, axis=0))
    return int(idx[np.argmin(d)])


def test_time_attack(params, z: "LabeledPoint", anchors: "AnchorSet",
                     attack: AttackConfig, rng: SeededRng) -> np.ndarray:
    """Untargeted attack: maximize distance to the nearest same-label anchor.

    Success is judged afterwards by attack_success, never assumed here.
    """
    if attack.epsilon == 0.0:
        return np.asarray(z.x, dtype=np.float64).copy()
    z_emb = forward_many(params, z.x[None, :]).embeddings[0]
    j = _nearest_with_label(params, anchors, z_emb, z.label)
    e_ref = anchors.embeddings(params)[j][None, :]
    return max_distance_rows(params, z.x[None, :], e_ref, attack, rng, sign=1.0)[0]


def targeted_attack(params, z: "LabeledPoint", target_label: int, anchors: "AnchorSet",
                    attack: AttackConfig, rng: SeededRng) -> np.ndarray:
    """Targeted variant: minimize distance to the nearest anchor of the target label."""
    if attack.epsilon == 0.0:
        return np.asarray(z.x, dtype=np.float64).copy()
    z_emb = forward_many(params, z.x[None, :]).embeddings[0]
    j = _nearest_with_label(params, anchors, z_emb, target_label)
    e_ref = anchors.embeddings(params)[j][None, :]
    return max_distance_rows(params, z.x[None, :], e_ref, attack, rng, sign=-1.0)[0]


def attack_success(params, z: "LabeledPoint", z_adv: np.ndarray, anchors: "AnchorSet",
                   rng: SeededRng) -> bool:
    """True iff the nearest-anchor prediction changed.

    Both predictions replay the same tie-break stream, so identical inputs
    always agree.
    """
    from .evaluation import predict_label

    before = predict_label(params, anchors, z.x, rng)
    after = predict_label(params, anchors, z_adv, rng)
    return before != after


def targeted_success(params, z_adv: np.ndarray, target_label: int, anchors: "AnchorSet",
                     rng: SeededRng) -> bool:
    """True iff the perturbed point is predicted as the requested label."""
    from .evaluation import predict_label

    return predict_label(params, anchors, z_adv, rng) == target_label


def embedding_shift_attack(params, x: np.ndarray, attack: AttackConfig,
                           rng: SeededRng) -> np.ndarray:
    """Maximize d(f(z), f(x)) over the ball around x (the F3 regularizer max)."""
    x = np.asarray(x, dtype=np.float64)
    if attack.epsilon == 0.0:
        return x.copy()
    e_ref = forward_many(params, x[None, :]).embeddings
    return max_distance_rows(params, x[None, :], e_ref, attack, rng, sign=1.0)[0]


def embedding_shift_many(params, X: np.ndarray, attack: AttackConfig,
                         rng: SeededRng) -> np.ndarray:
    """Row-wise embedding-shift attack on a whole matrix of points."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if attack.epsilon == 0.0:
        return X.copy()
    e_ref = forward_many(params, X).embeddings
    return max_distance_rows(params, X, e_ref, attack, rng, sign=1.0)
