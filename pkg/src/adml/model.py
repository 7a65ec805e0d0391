"""ReLU multilayer perceptron embedding inputs onto the unit sphere.

Forward and backward passes are written out by hand in float64 numpy so
gradients can be checked against finite differences, and so attacks get
exact input-space gradients.  The final layer is affine followed by l2
normalization; hidden layers are affine + ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, require_finite, spectral_norm

__all__ = [
    "DegenerateEmbedding",
    "MlpParams",
    "ForwardTrace",
    "BatchTrace",
    "AdamState",
    "init_params",
    "init_adam_state",
    "forward",
    "forward_many",
    "forward_many_masked",
    "vjp_input",
    "vjp_params",
    "adam_step",
    "zero_grads",
    "lipschitz_upper_bound",
    "params_fingerprint",
]

# Pre-normalization magnitudes below this are treated as a broken model.
DEGENERATE_NORM = 1e-12


class DegenerateEmbedding(ValueError):
    """Raised when the pre-normalization embedding is numerically zero."""


@dataclass(frozen=True)
class MlpParams:
    """Layer weights/biases of the embedding net.

    weights[i] has shape (layer_dims[i+1], layer_dims[i]); biases[i] has
    length layer_dims[i+1].  Treated as immutable: optimizer steps build
    new arrays instead of mutating.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2 or any(d < 1 for d in dims):
            raise ValueError("layer_dims must list >= 2 positive sizes")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("weights/biases must have one entry per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValueError(f"layer {i} shape mismatch")
            require_finite(w, f"weights[{i}]")
            require_finite(b, f"biases[{i}]")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1


@dataclass(frozen=True)
class ForwardTrace:
    """Intermediate values of one forward pass, kept for backprop."""

    input: np.ndarray
    pre_activations: list[np.ndarray]
    post_activations: list[np.ndarray]
    pre_norm_embedding: np.ndarray
    embedding: np.ndarray


@dataclass(frozen=True)
class BatchTrace:
    """Row-wise forward traces for a (n, k) batch of inputs."""

    inputs: np.ndarray
    pre_activations: list[np.ndarray]
    post_activations: list[np.ndarray]
    pre_norm_embeddings: np.ndarray
    pre_norm_magnitudes: np.ndarray
    embeddings: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def row(self, i: int) -> ForwardTrace:
        return ForwardTrace(
            input=self.inputs[i],
            pre_activations=[z[i] for z in self.pre_activations],
            post_activations=[h[i] for h in self.post_activations],
            pre_norm_embedding=self.pre_norm_embeddings[i],
            embedding=self.embeddings[i],
        )


@dataclass
class AdamState:
    """ADAM moments plus hyperparameters; one state per trained model."""

    step: int
    m_weights: list[np.ndarray]
    m_biases: list[np.ndarray]
    v_weights: list[np.ndarray]
    v_biases: list[np.ndarray]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 0.0


def init_params(layer_dims, rng: SeededRng) -> MlpParams:
    """He-initialized weights (variance 2/fan_in), zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValueError("layer_dims must list >= 2 positive sizes")
    gen = rng.generator()
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(gen.standard_normal((fan_out, fan_in)) * scale)
        biases.append(np.zeros(fan_out))
    return MlpParams(dims, weights, biases)


def init_adam_state(
    params: MlpParams,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_hat: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamState:
    return AdamState(
        step=0,
        m_weights=[np.zeros_like(w) for w in params.weights],
        m_biases=[np.zeros_like(b) for b in params.biases],
        v_weights=[np.zeros_like(w) for w in params.weights],
        v_biases=[np.zeros_like(b) for b in params.biases],
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps_hat=eps_hat,
        weight_decay=weight_decay,
    )


def forward_many_masked(params: MlpParams, xs: np.ndarray):
    """(BatchTrace, degenerate_mask) without raising on degenerate rows.

    Rows whose pre-normalization magnitude is below DEGENERATE_NORM get a
    zero embedding and a floored magnitude; callers must mask them out.
    Attack drivers use this to step around dead ReLU regions.
    """
    xs = np.atleast_2d(require_finite(xs, "input batch"))
    if xs.shape[1] != params.input_dim:
        raise ValueError(
            f"input dim {xs.shape[1]} != model input dim {params.input_dim}"
        )
    pre, post = [], []
    h = xs
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0)
            post.append(h)
    pre_norm = pre[-1]
    mags = np.sqrt(np.sum(pre_norm * pre_norm, axis=1))
    degenerate = mags < DEGENERATE_NORM
    safe_mags = np.where(degenerate, 1.0, mags)
    emb = pre_norm / safe_mags[:, None]
    emb[degenerate] = 0.0
    return BatchTrace(xs, pre, post, pre_norm, safe_mags, emb), degenerate


def forward_many(params: MlpParams, xs: np.ndarray) -> BatchTrace:
    """Forward pass for a (n, k) batch; unit-sphere embeddings per row."""
    batch, degenerate = forward_many_masked(params, xs)
    if np.any(degenerate):
        raise DegenerateEmbedding("degenerate embedding")
    return batch


def forward(params: MlpParams, x: np.ndarray) -> ForwardTrace:
    """Embed one input vector; |embedding|_2 = 1."""
    x = require_finite(x)
    if x.ndim != 1:
        raise ValueError("forward expects a 1-D input vector")
    return forward_many(params, x[None, :]).row(0)


def _backward_cotangents(params, trace_pre, cotangents_emb, embeddings, mags):
    """Shared backward recursion: returns per-layer pre-activation cotangents.

    cotangents_emb is (n, d) w.r.t. the unit-sphere output.  The sphere
    normalization contributes (I - e e^T)/|z| per row; ReLU subgradient at
    exactly 0 is taken as 0.
    """
    radial = np.sum(cotangents_emb * embeddings, axis=1, keepdims=True)
    g = (cotangents_emb - radial * embeddings) / mags[:, None]
    per_layer = [None] * params.n_layers
    per_layer[-1] = g
    for i in range(params.n_layers - 1, 0, -1):
        g = per_layer[i] @ params.weights[i]
        g = g * (trace_pre[i - 1] > 0.0)
        per_layer[i - 1] = g
    return per_layer


def vjp_input(params: MlpParams, trace: ForwardTrace, cotangent: np.ndarray) -> np.ndarray:
    """u^T d(embedding)/d(input) for one trace: a length-k vector."""
    cot = require_finite(cotangent, "cotangent")
    if cot.shape != (params.embedding_dim,):
        raise ValueError("cotangent shape mismatch")
    return vjp_input_many(
        params,
        _batch_of_one(trace),
        cot[None, :],
    )[0]


def vjp_input_many(params: MlpParams, batch: BatchTrace, cotangents: np.ndarray) -> np.ndarray:
    """Row-wise input gradients for a batch: (n, k)."""
    cotangents = require_finite(cotangents, "cotangents")
    if cotangents.shape != batch.embeddings.shape:
        raise ValueError("cotangent shape mismatch")
    per_layer = _backward_cotangents(
        params, batch.pre_activations, cotangents, batch.embeddings, batch.pre_norm_magnitudes
    )
    return per_layer[0] @ params.weights[0]


def vjp_params(params: MlpParams, trace: ForwardTrace, cotangent: np.ndarray):
    """u^T d(embedding)/d(theta): (weight grads, bias grads) lists."""
    cot = require_finite(cotangent, "cotangent")
    if cot.shape != (params.embedding_dim,):
        raise ValueError("cotangent shape mismatch")
    return vjp_params_many(params, _batch_of_one(trace), cot[None, :])


def vjp_params_many(
    params: MlpParams,
    batch: BatchTrace,
    cotangents: np.ndarray,
    row_weights: np.ndarray | None = None,
):
    """Sum over rows of per-row parameter gradients, optionally weighted."""
    cotangents = require_finite(cotangents, "cotangents")
    if cotangents.shape != batch.embeddings.shape:
        raise ValueError("cotangent shape mismatch")
    if row_weights is not None:
        cotangents = cotangents * np.asarray(row_weights, dtype=np.float64)[:, None]
    per_layer = _backward_cotangents(
        params, batch.pre_activations, cotangents, batch.embeddings, batch.pre_norm_magnitudes
    )
    grad_w, grad_b = [], []
    inputs = [batch.inputs] + batch.post_activations
    for i in range(params.n_layers):
        g = per_layer[i]
        grad_w.append(g.T @ inputs[i])
        grad_b.append(np.sum(g, axis=0))
    return grad_w, grad_b


def _batch_of_one(trace: ForwardTrace) -> BatchTrace:
    mag = float(np.sqrt(np.dot(trace.pre_norm_embedding, trace.pre_norm_embedding)))
    return BatchTrace(
        inputs=trace.input[None, :],
        pre_activations=[z[None, :] for z in trace.pre_activations],
        post_activations=[h[None, :] for h in trace.post_activations],
        pre_norm_embeddings=trace.pre_norm_embedding[None, :],
        pre_norm_magnitudes=np.array([mag]),
        embeddings=trace.embedding[None, :],
    )


def zero_grads(params: MlpParams):
    """All-zero gradient with the shape of ``params``."""
    return [np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases]


def adam_step(params: MlpParams, grads, state: AdamState):
    """One ADAM update with bias correction and decoupled weight decay.

    Weight decay multiplies parameters by (1 - lr*weight_decay) before the
    moment update (decoupled form).  Returns (new params, new state).
    """
    grad_w, grad_b = grads
    for g in list(grad_w) + list(grad_b):
        if not np.all(np.isfinite(g)):
            raise ValueError("diverged")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    decay = 1.0 - state.lr * state.weight_decay
    new_w, new_b = [], []
    new_mw, new_mb, new_vw, new_vb = [], [], [], []
    for p, g, m, v in zip(params.weights, grad_w, state.m_weights, state.v_weights):
        p = p * decay
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_w.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat))
        new_mw.append(m)
        new_vw.append(v)
    for p, g, m, v in zip(params.biases, grad_b, state.m_biases, state.v_biases):
        p = p * decay
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_b.append(p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat))
        new_mb.append(m)
        new_vb.append(v)
    new_state = AdamState(
        step=t,
        m_weights=new_mw,
        m_biases=new_mb,
        v_weights=new_vw,
        v_biases=new_vb,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps_hat=state.eps_hat,
        weight_decay=state.weight_decay,
    )
    return MlpParams(params.layer_dims, new_w, new_b), new_state


def lipschitz_upper_bound(params: MlpParams, reference_points, spectral_iters: int = 200):
    """(L_unnorm, L_norm) Lipschitz bounds of the embedding map w.r.t. l2.

    L_unnorm = product of layer spectral norms: a global bound for the
    pre-normalization map (ReLU is 1-Lipschitz).  L_norm divides by the
    smallest pre-normalization magnitude observed on ``reference_points``
    and is valid only on the region where that magnitude is maintained.
    """
    xs = getattr(reference_points, "x", None)
    if xs is None:
        xs = np.atleast_2d(np.asarray(reference_points, dtype=np.float64))
    if xs.shape[0] == 0:
        raise ValueError("reference_points must be nonempty")
    l_unnorm = 1.0
    for i, w in enumerate(params.weights):
        l_unnorm *= spectral_norm(w, iters=spectral_iters, rng=SeededRng(0, 17 + i))
    batch = forward_many(params, xs)  # raises DegenerateEmbedding if broken
    r_min = float(np.min(batch.pre_norm_magnitudes))
    return l_unnorm, l_unnorm / r_min


def params_fingerprint(params: MlpParams) -> str:
    """Stable content hash used to key embedding caches."""
    import hashlib

    h = hashlib.blake2b(digest_size=16)
    h.update(repr(params.layer_dims).encode())
    for w, b in zip(params.weights, params.biases):
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()
