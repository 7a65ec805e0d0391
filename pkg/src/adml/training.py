"""Batch sampling, natural training, and the two robust training formulations.

Formulation 2 perturbs one component of each sampled group (Bernoulli-gated
by the attack rate) before the gradient step; Formulation 3 adds a
regularizer penalizing how far an input-space perturbation can move the
embedding.  Formulation 1 (perturb the whole dataset jointly under one max)
is intentionally not implemented: it cannot be paired with per-group
sampling and stochastic optimizers, which is exactly why it is rejected in
favor of F2/F3.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, AttackMethod, embedding_shift_many, inner_max_many
from .losses import (
    DIST_FLOOR,
    LossConfig,
    LossKind,
    Pair,
    PerturbTarget,
    Triplet,
)
from .model import (
    AdamState,
    MlpParams,
    adam_step,
    forward_many,
    init_adam_state,
    init_params,
    vjp_params_many,
    zero_grads,
)
from .numerics import Norm, SeededRng, STREAM_INIT, STREAM_SAMPLING, STREAM_ATTACK
from .synth import Dataset, LabeledPoint

__all__ = [
    "Formulation",
    "NegativeStrategy",
    "EarlyStoppingConfig",
    "TrainConfig",
    "TrainReport",
    "spc_batch_sampler",
    "build_pairs",
    "build_triplets",
    "natural_train_step",
    "adversarial_train_step_f2",
    "adversarial_train_step_f3",
    "train",
]

# Sub-stream tags used by the training loop.
_TAG_GAMMA = 11
_TAG_GROUPS = 12
_TAG_HOLDOUT = 13
_TAG_ES_EVAL = 14
_TAG_INNER = 15


class Formulation(enum.Enum):
    NATURAL = "natural"
    F2 = "f2"
    F3 = "f3"


class NegativeStrategy(enum.Enum):
    UNIFORM = "uniform"
    DISTANCE_WEIGHTED = "distance_weighted"


@dataclass(frozen=True)
class EarlyStoppingConfig:
    enabled: bool = False
    patience: int = 5
    holdout_fraction: float = 0.1


@dataclass(frozen=True)
class TrainConfig:
    """Full declarative description of one training run."""

    loss: LossConfig
    formulation: Formulation = Formulation.NATURAL
    attack: AttackConfig = field(
        default_factory=lambda: AttackConfig(AttackMethod.PGD, Norm.LINF, 0.01)
    )
    attack_rate: float = 0.5
    perturb_target: PerturbTarget = PerturbTarget.POSITIVE
    lambda_reg: float = 0.0
    epochs: int = 25
    batch_size: int = 32
    samples_per_class: int = 2
    negative_strategy: NegativeStrategy = NegativeStrategy.UNIFORM
    hidden_dims: tuple[int, ...] = (64, 32)
    embedding_dim: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 4e-4
    early_stopping: EarlyStoppingConfig = field(default_factory=EarlyStoppingConfig)
    master_seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.attack_rate <= 1.0):
            raise ValueError("attack_rate must lie in [0,1]")
        if self.batch_size % self.samples_per_class != 0:
            raise ValueError("batch_size must be divisible by samples_per_class")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class TrainReport:
    """Per-epoch history of one training run."""

    train_loss: list[float] = field(default_factory=list)
    benign_val_r1: list[float] = field(default_factory=list)
    adv_val_r1: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0
    checkpoint_ref: str = ""


def spc_batch_sampler(dataset: Dataset, batch_size: int, spc: int, rng: SeededRng):
    """Sample batch_size points: batch_size/spc distinct classes, spc members each."""
    if spc < 1 or batch_size % spc != 0:
        raise ValueError("batch_size must be a positive multiple of spc")
    n_classes_needed = batch_size // spc
    labels, counts = np.unique(dataset.y, return_counts=True)
    eligible = labels[counts >= spc]
    if eligible.size < n_classes_needed:
        raise ValueError(
            f"need {n_classes_needed} classes with >= {spc} members, have {eligible.size}"
        )
    gen = rng.generator()
    chosen = gen.choice(eligible, size=n_classes_needed, replace=False)
    batch = []
    for label in chosen:
        members = dataset.class_indices(int(label))
        picked = gen.choice(members, size=spc, replace=False)
        for idx in picked:
            batch.append(dataset.point(int(idx)))
    return batch


def _partner_map(batch) -> list[int]:
    """Index of each point's unique same-class partner in an SPC-2 batch."""
    by_label: dict[int, list[int]] = {}
    for i, p in enumerate(batch):
        by_label.setdefault(p.label, []).append(i)
    partners = [-1] * len(batch)
    for label, members in by_label.items():
        if len(members) != 2:
            raise ValueError("pair/triplet construction requires an SPC-2 batch")
        a, b = members
        partners[a], partners[b] = b, a
    return partners


def _negative_probabilities(anchor_emb, candidate_embs, cap: float = 50.0) -> np.ndarray:
    """Inverse-density weights over candidate negatives, capped and normalized."""
    d = np.sqrt(np.sum((candidate_embs - anchor_emb) ** 2, axis=1))
    m = d.size
    std = float(np.std(d))
    if std == 0.0 or m < 2:
        return np.full(m, 1.0 / m)
    h = 1.06 * std * m ** (-0.2)
    # Gaussian kernel density estimate at each candidate distance
    z = (d[:, None] - d[None, :]) / h
    dens = np.mean(np.exp(-0.5 * z * z), axis=1) / (h * np.sqrt(2.0 * np.pi))
    w = 1.0 / np.maximum(dens, 1e-300)
    w = w / np.mean(w)
    w = np.minimum(w, cap)
    return w / np.sum(w)


def _pick_negative(i, batch, strategy, embeddings, gen) -> int:
    candidates = [j for j, p in enumerate(batch) if p.label != batch[i].label]
    if not candidates:
        raise ValueError("no different-class candidate in batch")
    if strategy is NegativeStrategy.UNIFORM or embeddings is None:
        return int(candidates[gen.integers(0, len(candidates))])
    probs = _negative_probabilities(embeddings[i], embeddings[candidates])
    return int(candidates[gen.choice(len(candidates), p=probs)])


def build_pairs(batch, rng: SeededRng,
                negative_strategy: NegativeStrategy = NegativeStrategy.UNIFORM,
                params: MlpParams | None = None):
    """2x|batch| pairs: each point once with its partner, once with a negative."""
    partners = _partner_map(batch)
    embeddings = None
    if negative_strategy is NegativeStrategy.DISTANCE_WEIGHTED:
        if params is None:
            raise ValueError("distance-weighted sampling needs model params")
        embeddings = forward_many(params, np.stack([p.x for p in batch])).embeddings
    gen = rng.generator()
    pairs = [Pair(p, batch[partners[i]]) for i, p in enumerate(batch)]
    for i, p in enumerate(batch):
        j = _pick_negative(i, batch, negative_strategy, embeddings, gen)
        pairs.append(Pair(p, batch[j]))
    return pairs


def build_triplets(batch, negative_strategy: NegativeStrategy,
                   params: MlpParams | None, rng: SeededRng):
    """|batch| triplets: anchor with its in-class partner plus a sampled negative."""
    partners = _partner_map(batch)
    embeddings = None
    if negative_strategy is NegativeStrategy.DISTANCE_WEIGHTED:
        if params is None:
            raise ValueError("distance-weighted sampling needs model params")
        embeddings = forward_many(params, np.stack([p.x for p in batch])).embeddings
    gen = rng.generator()
    triplets = []
    for i, p in enumerate(batch):
        j = _pick_negative(i, batch, negative_strategy, embeddings, gen)
        triplets.append(Triplet(p, batch[partners[i]], batch[j]))
    return triplets


def _accumulate(grads_total, grads_part):
    for gt, gp in zip(grads_total[0], grads_part[0]):
        gt += gp
    for gt, gp in zip(grads_total[1], grads_part[1]):
        gt += gp


def _pairs_loss_grads(params, cfg_loss: LossConfig, pairs, weight: float):
    """(sum of pair losses * weight, parameter grads) for contrastive pairs."""
    X = np.empty((2 * len(pairs), params.input_dim))
    for g, pair in enumerate(pairs):
        X[2 * g] = pair.anchor.x
        X[2 * g + 1] = pair.other.x
    batch = forward_many(params, X)
    e = batch.embeddings
    ea, eo = e[0::2], e[1::2]
    diff = ea - eo
    d = np.sqrt(np.sum(diff * diff, axis=1))
    same = np.array([p.same_label for p in pairs])
    alpha = cfg_loss.margin_alpha
    losses = np.where(same, d, alpha - d)
    sign = np.where(same, 1.0, -1.0)
    if cfg_loss.hinge_negative:
        inactive = (~same) & (alpha - d <= 0.0)
        losses = np.where(inactive, 0.0, losses)
        sign = np.where(inactive, 0.0, sign)
    # d = 0 on a same-label pair sits at the loss minimum; use subgradient 0
    singular = d < DIST_FLOOR
    sign = np.where(singular, 0.0, sign)
    cot_a = sign[:, None] * diff / np.where(singular, 1.0, d)[:, None]
    cot = np.empty_like(e)
    cot[0::2] = cot_a * weight
    cot[1::2] = -cot_a * weight
    grads = vjp_params_many(params, batch, cot)
    return float(np.sum(losses)) * weight, grads


def _triplets_loss_grads(params, cfg_loss: LossConfig, triplets, weight: float):
    X = np.empty((3 * len(triplets), params.input_dim))
    for g, t in enumerate(triplets):
        X[3 * g] = t.anchor.x
        X[3 * g + 1] = t.positive.x
        X[3 * g + 2] = t.negative.x
    batch = forward_many(params, X)
    e = batch.embeddings
    ea, ep, en = e[0::3], e[1::3], e[2::3]
    dap_v = ea - ep
    dan_v = ea - en
    d_ap = np.sqrt(np.sum(dap_v * dap_v, axis=1))
    d_an = np.sqrt(np.sum(dan_v * dan_v, axis=1))
    raw = d_ap - d_an + cfg_loss.margin_alpha
    active = raw > 0.0
    losses = np.where(active, raw, 0.0)
    sing_ap = d_ap < DIST_FLOOR
    sing_an = d_an < DIST_FLOOR
    g_ap = dap_v / np.where(sing_ap, 1.0, d_ap)[:, None]
    g_ap[sing_ap] = 0.0
    g_an = dan_v / np.where(sing_an, 1.0, d_an)[:, None]
    g_an[sing_an] = 0.0
    w = (active.astype(float) * weight)[:, None]
    cot = np.empty_like(e)
    cot[0::3] = (g_ap - g_an) * w
    cot[1::3] = -g_ap * w
    cot[2::3] = g_an * w
    grads = vjp_params_many(params, batch, cot)
    return float(np.sum(losses)) * weight, grads


def _groups_loss_grads(params, cfg_loss: LossConfig, groups):
    """(mean group loss, parameter gradient of the mean) in fixed group order."""
    if not groups:
        raise ValueError("empty group list")
    weight = 1.0 / len(groups)
    if isinstance(groups[0], Pair):
        return _pairs_loss_grads(params, cfg_loss, groups, weight)
    return _triplets_loss_grads(params, cfg_loss, groups, weight)


def natural_train_step(params, state, batch_groups, cfg: TrainConfig):
    """Mean group loss and one ADAM step on its parameter gradient."""
    loss, grads = _groups_loss_grads(params, cfg.loss, batch_groups)
    params, state = adam_step(params, grads, state)
    return params, state, loss


def _eligible_for_perturbation(group, cfg: TrainConfig) -> bool:
    """Attack-rate gating: positive targets touch same-label pairs only,
    negative targets different-label pairs only, anchors everything."""
    if isinstance(group, Triplet):
        return True
    if cfg.perturb_target is PerturbTarget.POSITIVE:
        return group.same_label
    if cfg.perturb_target is PerturbTarget.NEGATIVE:
        return not group.same_label
    return True


def _component_for_group(group, cfg: TrainConfig) -> PerturbTarget:
    """Which structural component the configured target maps to."""
    if isinstance(group, Triplet):
        return cfg.perturb_target
    if cfg.perturb_target is PerturbTarget.ANCHOR:
        return PerturbTarget.ANCHOR
    return PerturbTarget.POSITIVE  # the pair's second component, either gating


def adversarial_train_step_f2(params, state, batch_groups, cfg: TrainConfig, rng: SeededRng):
    """Formulation 2: per-group Bernoulli(attack_rate) inner maximization."""
    gamma_gen = rng.derive(_TAG_GAMMA).generator()
    selected = []
    for i, g in enumerate(batch_groups):
        if not _eligible_for_perturbation(g, cfg):
            continue
        if gamma_gen.uniform() < cfg.attack_rate:
            selected.append(i)
    groups = list(batch_groups)
    if selected and cfg.attack.epsilon > 0.0:
        to_attack = [groups[i] for i in selected]
        comp = _component_for_group(to_attack[0], cfg)
        perturbed = inner_max_many(
            params, cfg.loss, to_attack, comp, cfg.attack, rng.derive(_TAG_INNER),
            strict=False,
        )
        for pos, i in enumerate(selected):
            groups[i] = perturbed[pos]
    loss, grads = _groups_loss_grads(params, cfg.loss, groups)
    params, state = adam_step(params, grads, state)
    return params, state, loss


def adversarial_train_step_f3(params, state, batch, batch_groups, cfg: TrainConfig,
                              rng: SeededRng):
    """Formulation 3: natural loss plus lambda * mean max embedding shift.

    The shifted points are recomputed each step and treated as constants
    during the parameter gradient (Danskin-style).
    """
    loss, grads = _groups_loss_grads(params, cfg.loss, batch_groups)
    if cfg.lambda_reg > 0.0 and cfg.attack.epsilon > 0.0:
        X = np.stack([p.x for p in batch])
        Z = embedding_shift_many(params, X, cfg.attack, rng.derive(_TAG_INNER))
        stacked = np.concatenate([Z, X], axis=0)
        btr = forward_many(params, stacked)
        ez, ex = btr.embeddings[: len(batch)], btr.embeddings[len(batch):]
        diff = ez - ex
        d = np.sqrt(np.sum(diff * diff, axis=1))
        singular = d < DIST_FLOOR
        w = cfg.lambda_reg / len(batch)
        cot_z = diff / np.where(singular, 1.0, d)[:, None] * w
        cot_z[singular] = 0.0
        cot = np.concatenate([cot_z, -cot_z], axis=0)
        reg_grads = vjp_params_many(params, btr, cot)
        _accumulate(grads, reg_grads)
        loss += float(np.mean(d)) * cfg.lambda_reg
    params, state = adam_step(params, grads, state)
    return params, state, loss


def _split_holdout(dataset: Dataset, fraction: float, spc: int, rng: SeededRng):
    """Stratified holdout split keeping >= spc members of each class in train."""
    gen = rng.generator()
    holdout_idx = []
    for label in range(dataset.n_classes):
        members = dataset.class_indices(label)
        if members.size == 0:
            continue
        n_hold = max(2, int(round(fraction * members.size)))
        if members.size - n_hold < spc:
            raise ValueError("holdout_fraction leaves too few points per class")
        picked = gen.choice(members, size=n_hold, replace=False)
        holdout_idx.extend(int(i) for i in picked)
    holdout_idx = sorted(holdout_idx)
    train_idx = sorted(set(range(len(dataset))) - set(holdout_idx))
    return dataset.subset(train_idx), dataset.subset(holdout_idx)


def _cheap_eval_attack(cfg: TrainConfig) -> AttackConfig:
    """Single-step attack used for the per-epoch early-stopping evaluation."""
    if cfg.attack.norm is Norm.LINF:
        return replace(cfg.attack, method=AttackMethod.RFGSM, step_size=None, iterations=1)
    return replace(cfg.attack, method=AttackMethod.PGD, iterations=1, step_size=None)


def _clone_params(params: MlpParams) -> MlpParams:
    return MlpParams(
        params.layer_dims,
        [w.copy() for w in params.weights],
        [b.copy() for b in params.biases],
    )


def train(dataset: Dataset, cfg: TrainConfig):
    """Run the configured training; returns (params, TrainReport).

    With early stopping enabled, a stratified holdout is carved out of the
    training data, adversarial R@1 under a cheap single-step attack is
    evaluated each epoch, and the best checkpoint is returned after the
    patience budget runs out.
    """
    from .evaluation import recall_at_1, robust_metrics

    master = SeededRng(cfg.master_seed)
    dims = (dataset.input_dim, *cfg.hidden_dims, cfg.embedding_dim)
    params = init_params(dims, master.stream(STREAM_INIT))
    state = init_adam_state(
        params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
        eps_hat=cfg.eps_hat, weight_decay=cfg.weight_decay,
    )
    report = TrainReport()
    es = cfg.early_stopping
    train_part = dataset
    holdout = None
    if es.enabled:
        train_part, holdout = _split_holdout(
            dataset, es.holdout_fraction, cfg.samples_per_class, master.derive(_TAG_HOLDOUT)
        )
        eval_attack = _cheap_eval_attack(cfg)
    best_params = _clone_params(params)
    best_metric = -np.inf
    since_best = 0
    steps_per_epoch = max(1, len(train_part) // cfg.batch_size)
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for step in range(steps_per_epoch):
            srng = master.stream(STREAM_SAMPLING).derive(epoch, step)
            batch = spc_batch_sampler(train_part, cfg.batch_size, cfg.samples_per_class, srng)
            grng = srng.derive(_TAG_GROUPS)
            if cfg.loss.kind is LossKind.CONTRASTIVE:
                groups = build_pairs(batch, grng, cfg.negative_strategy, params)
            else:
                groups = build_triplets(batch, cfg.negative_strategy, params, grng)
            arng = master.stream(STREAM_ATTACK).derive(epoch, step)
            if cfg.formulation is Formulation.NATURAL:
                params, state, loss = natural_train_step(params, state, groups, cfg)
            elif cfg.formulation is Formulation.F2:
                params, state, loss = adversarial_train_step_f2(params, state, groups, cfg, arng)
            else:
                params, state, loss = adversarial_train_step_f3(
                    params, state, batch, groups, cfg, arng
                )
            epoch_losses.append(loss)
        report.train_loss.append(float(np.mean(epoch_losses)))
        report.epochs_run = epoch + 1
        if es.enabled:
            benign_r1 = recall_at_1(params, holdout)
            adv_r1 = robust_metrics(
                params, holdout, eval_attack, master.derive(_TAG_ES_EVAL, epoch)
            ).r_at_1
            report.benign_val_r1.append(benign_r1)
            report.adv_val_r1.append(adv_r1)
            if adv_r1 > best_metric:
                best_metric = adv_r1
                best_params = _clone_params(params)
                report.best_epoch = epoch + 1
                since_best = 0
            else:
                since_best += 1
                if since_best >= es.patience:
                    break
        else:
            report.benign_val_r1.append(float("nan"))
            report.adv_val_r1.append(float("nan"))
            report.best_epoch = epoch + 1
    if es.enabled and cfg.epochs > 0:
        return best_params, report
    return params, report
