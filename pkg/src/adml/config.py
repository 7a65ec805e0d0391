"""Line-oriented experiment configuration: parsing, canonical serialization, presets.

The format is ``section.key = value`` with ``#`` comments.  Every key has a
default, so an empty document is a valid experiment; unknown keys are
rejected with their line number.  ``serialize_config(parse_config(text))``
is canonical: parsing it again yields an equal config.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .attacks import AttackConfig, AttackMethod
from .losses import LossConfig, LossKind, PerturbTarget
from .numerics import Norm
from .synth import GaussianMixtureConfig
from .training import (
    EarlyStoppingConfig,
    Formulation,
    NegativeStrategy,
    TrainConfig,
)

__all__ = [
    "ExperimentConfig",
    "CertifySettings",
    "parse_config",
    "serialize_config",
    "config_hash",
    "preset_text",
    "PRESET_NAMES",
]


# ---------------------------------------------------------------------------
# typed key registry


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_int(s: str) -> int:
    return int(s)


def _parse_float(s: str) -> float:
    return float(s)


def _parse_opt_float(s: str):
    return None if s == "" else float(s)


def _parse_int_list(s: str):
    return tuple(int(t) for t in s.split(",") if t.strip() != "")


def _enum_parser(enum_cls):
    def parse(s: str):
        try:
            return enum_cls(s.lower())
        except ValueError:
            options = ", ".join(e.value for e in enum_cls)
            raise ValueError(f"expected one of {options}, got {s!r}") from None

    return parse


def _parse_target(s: str) -> PerturbTarget:
    try:
        return PerturbTarget[s.upper()]
    except KeyError:
        raise ValueError(f"expected one of anchor, positive, negative, got {s!r}") from None


def _parse_methods(s: str):
    return tuple(_enum_parser(AttackMethod)(t.strip()) for t in s.split(",") if t.strip())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (AttackMethod, Norm, LossKind, Formulation, NegativeStrategy)):
        return value.value
    if isinstance(value, PerturbTarget):
        return value.name.lower()
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _ge(bound, what):
    def check(v):
        if v is not None and v < bound:
            raise ValueError(f"{what} must be >= {bound}")

    return check


def _fraction(what):
    def check(v):
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"{what} must lie in [0,1]")

    return check


@dataclass(frozen=True)
class _Key:
    parse: callable
    default: object
    validate: callable = lambda v: None


_REGISTRY: dict[str, _Key] = {
    # dataset
    "data.input_dim": _Key(_parse_int, 3072, _ge(1, "input_dim")),
    "data.mu_a": _Key(_parse_float, 0.25),
    "data.mu_b": _Key(_parse_float, 0.75),
    "data.sigma": _Key(_parse_float, 0.025, _ge(1e-12, "sigma")),
    "data.n_train": _Key(_parse_int, 508, _ge(2, "n_train")),
    "data.n_test": _Key(_parse_int, 516, _ge(2, "n_test")),
    "data.clip_to_unit_box": _Key(_parse_bool, True),
    # model
    "model.hidden_dims": _Key(_parse_int_list, (64, 32)),
    "model.embedding_dim": _Key(_parse_int, 2, _ge(1, "embedding_dim")),
    # training
    "train.loss": _Key(_enum_parser(LossKind), LossKind.CONTRASTIVE),
    "train.margin_alpha": _Key(_parse_float, 1.0, _ge(1e-12, "margin_alpha")),
    "train.hinge_negative": _Key(_parse_bool, True),
    "train.formulation": _Key(_enum_parser(Formulation), Formulation.NATURAL),
    "train.attack_rate": _Key(_parse_float, 0.5, _fraction("attack_rate")),
    "train.perturb_target": _Key(_parse_target, PerturbTarget.POSITIVE),
    "train.lambda_reg": _Key(_parse_float, 0.0, _ge(0.0, "lambda_reg")),
    "train.epochs": _Key(_parse_int, 25, _ge(0, "epochs")),
    "train.batch_size": _Key(_parse_int, 32, _ge(1, "batch_size")),
    "train.samples_per_class": _Key(_parse_int, 2, _ge(1, "samples_per_class")),
    "train.negative_strategy": _Key(_enum_parser(NegativeStrategy), NegativeStrategy.UNIFORM),
    "train.lr": _Key(_parse_float, 1e-3, _ge(0.0, "lr")),
    "train.beta1": _Key(_parse_float, 0.9, _fraction("beta1")),
    "train.beta2": _Key(_parse_float, 0.999, _fraction("beta2")),
    "train.eps_hat": _Key(_parse_float, 1e-8, _ge(0.0, "eps_hat")),
    "train.weight_decay": _Key(_parse_float, 4e-4, _ge(0.0, "weight_decay")),
    "train.early_stopping": _Key(_parse_bool, False),
    "train.patience": _Key(_parse_int, 5, _ge(1, "patience")),
    "train.holdout_fraction": _Key(_parse_float, 0.1, _fraction("holdout_fraction")),
    # inner-maximization attack used during training
    "train.attack.method": _Key(_enum_parser(AttackMethod), AttackMethod.PGD),
    "train.attack.norm": _Key(_enum_parser(Norm), Norm.LINF),
    "train.attack.epsilon": _Key(_parse_float, 0.01, _ge(0.0, "epsilon")),
    "train.attack.iterations": _Key(_parse_int, 5, _ge(1, "iterations")),
    "train.attack.step_size": _Key(_parse_opt_float, None, _ge(0.0, "step_size")),
    "train.attack.random_init": _Key(_parse_bool, True),
    "train.attack.cw_lambda": _Key(_parse_float, 0.1, _ge(0.0, "cw_lambda")),
    "train.attack.cw_lr": _Key(_parse_float, 0.01, _ge(0.0, "cw_lr")),
    # evaluation attacks
    "eval.attacks": _Key(_parse_methods, (AttackMethod.PGD,)),
    "attack.norm": _Key(_enum_parser(Norm), Norm.LINF),
    "attack.epsilon": _Key(_parse_float, 0.01, _ge(0.0, "epsilon")),
    "attack.iterations": _Key(_parse_int, 5, _ge(1, "iterations")),
    "attack.step_size": _Key(_parse_opt_float, None, _ge(0.0, "step_size")),
    "attack.random_init": _Key(_parse_bool, True),
    "attack.cw_lambda": _Key(_parse_float, 0.1, _ge(0.0, "cw_lambda")),
    "attack.cw_lr": _Key(_parse_float, 0.01, _ge(0.0, "cw_lr")),
    "attack.cw_iterations": _Key(_parse_int, 50, _ge(1, "cw_iterations")),
    # certification
    "certify.n_points": _Key(_parse_int, 100, _ge(1, "n_points")),
    "certify.safety_factor": _Key(_parse_float, 2.0, _ge(1.0, "safety_factor")),
    "certify.spectral_iters": _Key(_parse_int, 200, _ge(1, "spectral_iters")),
    "certify.event_samples": _Key(_parse_int, 500, _ge(1, "event_samples")),
    # run
    "run.seeds": _Key(_parse_int_list, (1, 2, 3, 4, 5)),
    "run.threads": _Key(_parse_int, 1, _ge(1, "threads")),
}


@dataclass(frozen=True)
class CertifySettings:
    n_points: int = 100
    safety_factor: float = 2.0
    spectral_iters: int = 200
    event_samples: int = 500


@dataclass(frozen=True)
class ExperimentConfig:
    """Typed view of one experiment document (defaults resolved)."""

    values: tuple  # canonical (key, value) pairs in registry order

    def __getitem__(self, key: str):
        for k, v in self.values:
            if k == key:
                return v
        raise KeyError(key)

    def mixture_config(self, seed: int) -> GaussianMixtureConfig:
        return GaussianMixtureConfig(
            input_dim=self["data.input_dim"],
            mu_a=self["data.mu_a"],
            mu_b=self["data.mu_b"],
            sigma=self["data.sigma"],
            n_train=self["data.n_train"],
            n_test=self["data.n_test"],
            clip_to_unit_box=self["data.clip_to_unit_box"],
            seed=seed,
        )

    def train_attack(self) -> AttackConfig:
        return AttackConfig(
            method=self["train.attack.method"],
            norm=self["train.attack.norm"],
            epsilon=self["train.attack.epsilon"],
            iterations=self["train.attack.iterations"],
            step_size=self["train.attack.step_size"],
            random_init=self["train.attack.random_init"],
            cw_lambda=self["train.attack.cw_lambda"],
            cw_lr=self["train.attack.cw_lr"],
        )

    def eval_attack(self, method: AttackMethod) -> AttackConfig:
        iterations = (
            self["attack.cw_iterations"]
            if method is AttackMethod.CW
            else self["attack.iterations"]
        )
        return AttackConfig(
            method=method,
            norm=self["attack.norm"],
            epsilon=self["attack.epsilon"],
            iterations=iterations,
            step_size=self["attack.step_size"],
            random_init=self["attack.random_init"],
            cw_lambda=self["attack.cw_lambda"],
            cw_lr=self["attack.cw_lr"],
        )

    def train_config(self, master_seed: int, formulation=None, attack_rate=None,
                     perturb_target=None) -> TrainConfig:
        return TrainConfig(
            loss=LossConfig(
                kind=self["train.loss"],
                margin_alpha=self["train.margin_alpha"],
                hinge_negative=self["train.hinge_negative"],
            ),
            formulation=formulation or self["train.formulation"],
            attack=self.train_attack(),
            attack_rate=self["train.attack_rate"] if attack_rate is None else attack_rate,
            perturb_target=perturb_target or self["train.perturb_target"],
            lambda_reg=self["train.lambda_reg"],
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            samples_per_class=self["train.samples_per_class"],
            negative_strategy=self["train.negative_strategy"],
            hidden_dims=self["model.hidden_dims"],
            embedding_dim=self["model.embedding_dim"],
            lr=self["train.lr"],
            beta1=self["train.beta1"],
            beta2=self["train.beta2"],
            eps_hat=self["train.eps_hat"],
            weight_decay=self["train.weight_decay"],
            early_stopping=EarlyStoppingConfig(
                enabled=self["train.early_stopping"],
                patience=self["train.patience"],
                holdout_fraction=self["train.holdout_fraction"],
            ),
            master_seed=master_seed,
        )

    def certify_settings(self) -> CertifySettings:
        return CertifySettings(
            n_points=self["certify.n_points"],
            safety_factor=self["certify.safety_factor"],
            spectral_iters=self["certify.spectral_iters"],
            event_samples=self["certify.event_samples"],
        )

    @property
    def eval_attacks(self):
        return self["eval.attacks"]

    @property
    def seeds(self):
        return self["run.seeds"]

    @property
    def threads(self) -> int:
        return self["run.threads"]


def parse_config(text: str) -> ExperimentConfig:
    """Parse a config document; unknown keys and bad values name their line."""
    resolved = {key: spec.default for key, spec in _REGISTRY.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _REGISTRY:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        spec = _REGISTRY[key]
        try:
            parsed = spec.parse(value)
            spec.validate(parsed)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: invalid value for {key!r}: {exc}") from None
        resolved[key] = parsed
    # cross-key validation mirrors TrainConfig invariants
    if resolved["train.batch_size"] % resolved["train.samples_per_class"] != 0:
        raise ValueError("train.batch_size must be divisible by train.samples_per_class")
    return ExperimentConfig(tuple((k, resolved[k]) for k in _REGISTRY))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form with every default expanded."""
    lines = ["# resolved experiment configuration"]
    section = ""
    for key, value in cfg.values:
        sec = key.split(".", 1)[0]
        if sec != section:
            lines.append("")
            section = sec
        lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.blake2b(serialize_config(cfg).encode(), digest_size=8).hexdigest()


# ---------------------------------------------------------------------------
# named presets

_APPENDIX_COMMON = """
# two-class Gaussian mixture benchmark, appendix configuration
data.input_dim = 3072
data.sigma = 0.025
data.n_train = 508
data.n_test = 516

model.hidden_dims = 64,32
model.embedding_dim = 2

train.loss = contrastive
train.margin_alpha = 1.0
# paper-literal contrastive form: the different-label term is not hinged.
# At desk scale this is what reproduces the benchmark numbers.
train.hinge_negative = false
train.epochs = 25
# SPC-2 with two classes caps the batch at 4 points
train.batch_size = 4
train.attack.method = pgd
train.attack.norm = linf
train.attack.epsilon = 0.01
train.attack.iterations = 5

eval.attacks = pgd
attack.norm = linf
attack.epsilon = 0.01
attack.iterations = 5
"""

_PRESETS = {
    "appendix-synthetic-natural": _APPENDIX_COMMON + """
train.formulation = natural
# tuned for the from-scratch MLP: large enough to separate the classes,
# small enough to keep the natural model in its sharp regime
train.lr = 2.5e-5
""",
    "appendix-synthetic-robust": _APPENDIX_COMMON + """
train.formulation = f2
train.attack_rate = 0.5
train.perturb_target = positive
# robust training needs more optimizer travel to flatten the embedding map
train.lr = 1e-4
""",
    "main-synthetic": """
# larger-sigma variant of the synthetic benchmark, desk-scaled sample count
data.input_dim = 3072
data.sigma = 0.075
data.n_train = 2048
data.n_test = 512

model.hidden_dims = 64,32
model.embedding_dim = 2

train.loss = contrastive
train.margin_alpha = 1.0
train.hinge_negative = false
train.epochs = 10
train.batch_size = 4
train.formulation = natural
train.lr = 2.5e-5

eval.attacks = pgd
attack.norm = linf
attack.epsilon = 0.01
attack.iterations = 5
""",
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def preset_text(name: str) -> str:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    return _PRESETS[name]
