"""Shared helpers: smooth random instances and a finite-difference oracle."""

import numpy as np
import pytest

from adml.model import MlpParams, forward, init_params
from adml.numerics import SeededRng


def rand_params(gen: np.random.Generator, dims, bias_scale: float = 0.05) -> MlpParams:
    """Random network with nonzero biases (breaks ReLU homogeneity)."""
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(gen.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(gen.standard_normal(fan_out) * bias_scale)
    return MlpParams(tuple(dims), weights, biases)


def smooth_input(gen: np.random.Generator, params: MlpParams, margin: float = 1e-3,
                 max_tries: int = 200) -> np.ndarray:
    """Input whose pre-activations all sit at least ``margin`` from ReLU kinks."""
    for _ in range(max_tries):
        x = gen.uniform(0.0, 1.0, params.input_dim)
        trace = forward(params, x)
        ok = all(np.min(np.abs(z)) > margin for z in trace.pre_activations[:-1])
        if ok and np.sqrt(np.dot(trace.pre_norm_embedding, trace.pre_norm_embedding)) > margin:
            return x
    raise RuntimeError("could not sample a smooth input")


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of a vector."""
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


def identity_params(k: int = 2, scale: float = 1.0) -> MlpParams:
    """Single linear layer scale*I with zero bias: embeddings = normalized input."""
    return MlpParams((k, k), [np.eye(k) * scale], [np.zeros(k)])


def circle_input(angle: float) -> np.ndarray:
    """Point on the unit circle; with identity_params it embeds to itself."""
    return np.array([np.cos(angle), np.sin(angle)])


def chord_angle(d: float) -> float:
    """Angle between unit vectors whose chord distance is d."""
    return 2.0 * np.arcsin(d / 2.0)


@pytest.fixture
def gen():
    return np.random.Generator(np.random.Philox(key=20240817))


@pytest.fixture
def rng():
    return SeededRng(20240817)
