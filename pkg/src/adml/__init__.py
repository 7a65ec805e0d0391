"""Toolkit for training, attacking, evaluating and certifying deep metric
embedding models on labeled vector data."""

from .numerics import BallSpec, Norm, SeededRng, lp_norm, project_ball, spectral_norm
from .model import (
    AdamState,
    MlpParams,
    adam_step,
    forward,
    init_adam_state,
    init_params,
    lipschitz_upper_bound,
    vjp_input,
    vjp_params,
)
from .losses import (
    LossConfig,
    LossKind,
    Pair,
    PerturbTarget,
    Triplet,
    contrastive_loss,
    embed_distance,
    grad_distance,
    loss_grad_component,
    surrogate_contrastive,
    surrogate_triplet,
    triplet_loss,
)
from .attacks import (
    AttackConfig,
    AttackMethod,
    attack_success,
    cw_perturb,
    embedding_shift_attack,
    fgsm_perturb,
    inner_max,
    pgd_perturb,
    rfgsm_perturb,
    targeted_attack,
    test_time_attack,
)
from .training import (
    Formulation,
    NegativeStrategy,
    TrainConfig,
    TrainReport,
    train,
)
from .evaluation import (
    AnchorSet,
    MetricsReport,
    benign_metrics,
    knn_indices,
    map_at_r,
    nearest_anchor,
    predict_label,
    recall_at_1,
    robust_metrics,
)
from .certification import Certificate, certify_eps_robust, delta_separation
from .synth import Dataset, GaussianMixtureConfig, LabeledPoint, generate_mixture

__version__ = "0.1.0"
