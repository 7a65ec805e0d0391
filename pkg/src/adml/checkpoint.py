"""Binary model checkpoints: parameters, optimizer moments, and metadata.

Layout: magic "ADMLCK\\x01", u32 little-endian JSON byte length, UTF-8 JSON
metadata (layer_dims, optimizer hyperparameters, step count, seed, config
hash), then float64 little-endian arrays in a fixed order: weights by
layer, biases by layer, first moments (weights then biases), second
moments (weights then biases).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .model import AdamState, MlpParams, init_adam_state

__all__ = ["CHECKPOINT_MAGIC", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_MAGIC = b"ADMLCK\x01"


def _array_order(params: MlpParams, state: AdamState):
    yield from params.weights
    yield from params.biases
    yield from state.m_weights
    yield from state.m_biases
    yield from state.v_weights
    yield from state.v_biases


def save_checkpoint(params: MlpParams, state: AdamState, meta: dict, path) -> None:
    """Write a checkpoint; ``meta`` must be JSON-serializable."""
    header = {
        "layer_dims": list(params.layer_dims),
        "step": state.step,
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps_hat": state.eps_hat,
        "weight_decay": state.weight_decay,
        "meta": dict(meta),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in _array_order(params, state):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise ValueError(f"unexpected end of checkpoint ({what})")
    return data


def load_checkpoint(path, expect_layer_dims=None):
    """Read a checkpoint back; returns (params, adam_state, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("bad checkpoint magic")
        (json_len,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, json_len, "metadata").decode("utf-8"))
        dims = tuple(int(d) for d in header["layer_dims"])
        if expect_layer_dims is not None and dims != tuple(expect_layer_dims):
            raise ValueError(
                f"checkpoint layer_dims {dims} do not match expected {tuple(expect_layer_dims)}"
            )
        shapes_w = [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]
        shapes_b = [(dims[i + 1],) for i in range(len(dims) - 1)]

        def read_arrays(shapes):
            out = []
            for shape in shapes:
                n = int(np.prod(shape))
                raw = _read_exact(fh, 8 * n, f"array of shape {shape}")
                out.append(np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64))
            return out

        weights = read_arrays(shapes_w)
        biases = read_arrays(shapes_b)
        m_w = read_arrays(shapes_w)
        m_b = read_arrays(shapes_b)
        v_w = read_arrays(shapes_w)
        v_b = read_arrays(shapes_b)
        extra = fh.read(1)
    if extra:
        raise ValueError("trailing bytes after checkpoint payload")
    params = MlpParams(dims, weights, biases)
    state = init_adam_state(
        params,
        lr=header["lr"],
        beta1=header["beta1"],
        beta2=header["beta2"],
        eps_hat=header["eps_hat"],
        weight_decay=header["weight_decay"],
    )
    state.step = int(header["step"])
    state.m_weights, state.m_biases = m_w, m_b
    state.v_weights, state.v_biases = v_w, v_b
    return params, state, header["meta"]
