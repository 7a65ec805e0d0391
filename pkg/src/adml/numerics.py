"""Seeded random streams, lp norms, epsilon-ball geometry and spectral norms.

Everything downstream (model, losses, attacks, training) builds on the
primitives here.  All arithmetic is 64-bit; all randomness flows through
counter-based Philox streams so that results are reproducible regardless
of call order or worker count.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "Norm",
    "BALL_TOL",
    "SeededRng",
    "STREAM_INIT",
    "STREAM_SAMPLING",
    "STREAM_ATTACK",
    "STREAM_TIEBREAK",
    "BallSpec",
    "lp_norm",
    "project_ball",
    "spectral_norm",
    "require_finite",
]

# Tolerance of the single ball-membership authority: |delta|_p <= eps + BALL_TOL.
BALL_TOL = 1e-12

# Stream purpose tags.  Derived sub-streams mix extra indices on top of these.
STREAM_INIT = 1
STREAM_SAMPLING = 2
STREAM_ATTACK = 3
STREAM_TIEBREAK = 4

_MASK64 = (1 << 64) - 1


class Norm(enum.Enum):
    L2 = "l2"
    LINF = "linf"


def _splitmix64(h: int, v: int) -> int:
    """One splitmix64 round folding ``v`` into state ``h`` (mod 2^64)."""
    h = (h + 0x9E3779B97F4A7C15 + v) & _MASK64
    h ^= h >> 30
    h = (h * 0xBF58476D1CE4E5B9) & _MASK64
    h ^= h >> 27
    h = (h * 0x94D049BB133111EB) & _MASK64
    h ^= h >> 31
    return h


@dataclass(frozen=True)
class SeededRng:
    """Immutable descriptor of one random stream.

    The pair (master_seed, stream_id) keys a counter-based Philox generator,
    so streams with distinct ids are independent and a given stream replays
    identically on every platform.  Descriptors are cheap: derive as many
    per-sample streams as needed instead of sharing a stateful generator.
    """

    master_seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at draw index 0 of this stream."""
        key = (self.master_seed & _MASK64) | ((self.stream_id & _MASK64) << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, stream_id: int) -> "SeededRng":
        """Same master seed, different purpose tag."""
        return replace(self, stream_id=stream_id & _MASK64)

    def derive(self, *indices: int) -> "SeededRng":
        """Sub-stream obtained by mixing indices into the stream id."""
        h = self.stream_id & _MASK64
        for v in indices:
            h = _splitmix64(h, v & _MASK64)
        return replace(self, stream_id=h)


def require_finite(arr: np.ndarray, what: str = "vector") -> np.ndarray:
    """Return ``arr`` as float64, raising on NaN/Inf entries."""
    out = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite {what}")
    return out


def lp_norm(v: np.ndarray, norm: Norm) -> float:
    """max|v_i| for LINF, sqrt(sum v_i^2) for L2."""
    v = require_finite(v)
    if v.size == 0:
        return 0.0
    if norm is Norm.LINF:
        return float(np.max(np.abs(v)))
    return float(np.sqrt(np.dot(v, v)))


@dataclass(frozen=True)
class BallSpec:
    """An lp ball B_p(center, epsilon) in input space."""

    norm: Norm
    epsilon: float
    center: np.ndarray

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        object.__setattr__(self, "center", require_finite(self.center, "ball center"))

    def contains_delta(self, delta: np.ndarray) -> bool:
        """The single membership authority: |delta|_p <= epsilon + BALL_TOL."""
        return lp_norm(delta, self.norm) <= self.epsilon + BALL_TOL

    def contains_point(self, x: np.ndarray) -> bool:
        return self.contains_delta(np.asarray(x, dtype=np.float64) - self.center)


def project_ball(delta: np.ndarray, ball: BallSpec) -> np.ndarray:
    """Project an offset from ``ball.center`` onto the ball.

    Interior points come back unchanged; LINF clamps per coordinate, L2
    rescales radially.  The result is a bit-exact fixed point: projecting
    twice returns the first projection unchanged.
    """
    delta = require_finite(delta)
    eps = ball.epsilon
    if ball.norm is Norm.LINF:
        return np.clip(delta, -eps, eps)
    n = float(np.sqrt(np.dot(delta, delta)))
    if n <= eps:
        return delta.copy()
    out = delta * (eps / n)
    # Rounding can leave the rescaled norm an ulp above eps; contract until
    # inside so a second projection is the identity.
    n = float(np.sqrt(np.dot(out, out)))
    while n > eps:
        out = out * (eps / n)
        n = float(np.sqrt(np.dot(out, out)))
    return out


def project_ball_rows(deltas: np.ndarray, norm: Norm, eps: float) -> np.ndarray:
    """Row-wise ball projection for a (n, k) matrix of offsets."""
    deltas = require_finite(deltas, "delta matrix")
    if norm is Norm.LINF:
        return np.clip(deltas, -eps, eps)
    out = deltas.copy()
    norms = np.sqrt(np.sum(out * out, axis=1))
    over = norms > eps
    while np.any(over):
        out[over] *= (eps / norms[over])[:, None]
        norms[over] = np.sqrt(np.sum(out[over] * out[over], axis=1))
        over = norms > eps
    return out


def spectral_norm(
    m: np.ndarray,
    iters: int = 100,
    rng: SeededRng | None = None,
    return_vector: bool = False,
):
    """Power-iteration estimate of the largest singular value of ``m``.

    The estimate is non-decreasing in ``iters`` up to convergence and never
    exceeds the Frobenius norm.  A zero matrix yields 0.0.
    """
    m = require_finite(m, "matrix")
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(m):
        v0 = np.zeros(m.shape[1])
        return (0.0, v0) if return_vector else 0.0
    gen = (rng or SeededRng(0, STREAM_INIT)).generator()
    v = gen.standard_normal(m.shape[1])
    nv = float(np.sqrt(np.dot(v, v)))
    if nv == 0.0:  # astronomically unlikely; retry once deterministically
        v = gen.standard_normal(m.shape[1])
        nv = float(np.sqrt(np.dot(v, v)))
    v = v / nv
    sigma = 0.0
    for _ in range(iters):
        u = m @ v
        sigma = float(np.sqrt(np.dot(u, u)))
        if sigma == 0.0:
            break
        w = m.T @ u
        nw = float(np.sqrt(np.dot(w, w)))
        if nw == 0.0:
            break
        v = w / nw
    if return_vector:
        return sigma, v
    return sigma
