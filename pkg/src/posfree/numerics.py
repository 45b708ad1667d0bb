"""Deterministic numeric substrate: validated matrix helpers, row softmax,
seeded RNG streams, Adam, and a central-difference gradient oracle.

All arrays are float64 numpy arrays. A "DenseMatrix" is simply a 2-D float64
ndarray; batched code elsewhere uses numpy's own broadcasting directly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError

DenseMatrix = np.ndarray


def as_matrix(x) -> DenseMatrix:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ConfigError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> DenseMatrix:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ConfigError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with per-row max subtraction.

    Accepts any leading batch dimensions.
    """
    m = np.asarray(m, dtype=np.float64)
    z = m - m.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


# --------------------------------------------------------------------------
# RNG streams
# --------------------------------------------------------------------------

def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ConfigError(f"negative stream label {label}")
        return int(label)
    digest = hashlib.blake2b(str(label).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """PCG64 generator for the stream addressed by ``(seed, *labels)``.

    Child streams are derived through ``SeedSequence`` spawn keys, so the
    stream for a given label path never depends on how many other streams
    were created or in which order, which keeps parallel sweeps reproducible.
    String labels are hashed with blake2b (stable across platforms).
    """
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(_label_key(x) for x in labels))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, *labels) -> int:
    """64-bit integer seed for a child stream, for storing in configs."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1),
                                spawn_key=tuple(_label_key(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), **hyper)

    def hyperparameters(self) -> dict:
        return {"beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ConfigError(
            f"adam shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if lr < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr}")
    b1, b2 = state.beta1, state.beta2
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * (grads * grads)
    if lr == 0.0:
        return params
    step = lr / (1.0 - b1 ** state.t)
    denom = np.sqrt(state.v / (1.0 - b2 ** state.t))
    denom += state.eps
    params -= step * state.m / denom
    return params


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

def finite_diff_grad(loss_fn: Callable[[np.ndarray], float], params: np.ndarray,
                     h: float = 1e-5, indices=None) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``params`` is perturbed in place and restored after each coordinate, so
    ``loss_fn`` may close over a view of it. ``indices`` restricts the
    estimate to a subset of flat coordinates (others are left at zero).
    """
    if h <= 0:
        raise ConfigError(f"step h must be positive, got {h}")
    flat = params.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(params))
        flat[i] = orig - h
        down = float(loss_fn(params))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing parameter index {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(params.shape)
