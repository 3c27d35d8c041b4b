"""Losses and the curriculum schedule used during pretraining."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import geometry
from .errors import InvalidInput

DEFAULT_TAU = 0.07


@dataclass(frozen=True)
class CurriculumSchedule:
    e1: int = 50
    e2: int = 100

    def __post_init__(self):
        if not 0 <= self.e1 < self.e2:
            raise InvalidInput(f"schedule needs 0 <= e1 < e2, got ({self.e1}, {self.e2})")


def alpha_schedule(e: float, s: CurriculumSchedule) -> float:
    """Weight of the Poincare term at epoch ``e``: 0 until e1, linear ramp, 1 from e2."""
    if e < 0:
        raise InvalidInput(f"epoch must be non-negative, got {e}")
    if e <= s.e1:
        return 0.0
    if e >= s.e2:
        return 1.0
    return (e - s.e1) / (s.e2 - s.e1)


def cosine_loss(h, h_hat) -> np.ndarray:
    """Cosine distance ``1 - cos(h, h_hat)`` row-wise, in [0, 2]."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    nh = np.linalg.norm(h, axis=-1)
    nt = np.linalg.norm(h_hat, axis=-1)
    if np.any(nh == 0) or np.any(nt == 0):
        raise InvalidInput("cosine loss is undefined for zero-norm vectors")
    cos = np.sum(h * h_hat, axis=-1) / (nh * nt)
    return 1.0 - np.clip(cos, -1.0, 1.0)


def cosine_grad(h, h_hat) -> np.ndarray:
    """Euclidean gradient of :func:`cosine_loss` with respect to ``h``."""
    h = np.asarray(h, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.float64)
    nh = np.linalg.norm(h, axis=-1, keepdims=True)
    nt = np.linalg.norm(h_hat, axis=-1, keepdims=True)
    dot = np.sum(h * h_hat, axis=-1, keepdims=True)
    return -(h_hat / (nh * nt) - dot * h / (nh**3 * nt))


def hysp_loss(h, h_hat, alpha: float, c: float = 1.0) -> np.ndarray:
    """Convex combination ``alpha * poincare + (1 - alpha) * cosine``."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInput(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * geometry.poincare_loss(h, h_hat, c) + (1.0 - alpha) * cosine_loss(h, h_hat)


def _unit(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise InvalidInput("empty embedding")
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidInput("cannot normalise a zero vector")
    return x / n


class NegativeQueue:
    """Fixed-capacity FIFO memory bank of unit-norm embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 0:
            raise InvalidInput("queue capacity must be non-negative")
        self.capacity = capacity
        self.dim = dim
        self._items: deque[np.ndarray] = deque(maxlen=capacity if capacity else None)

    def __len__(self) -> int:
        return len(self._items)

    def enqueue(self, keys) -> None:
        if self.capacity == 0:
            return
        keys = _unit(np.atleast_2d(keys))
        if keys.shape[-1] != self.dim:
            raise InvalidInput(f"queue holds dim {self.dim}, got {keys.shape[-1]}")
        for k in keys:
            self._items.append(k.copy())

    def as_array(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, self.dim))
        return np.stack(list(self._items))


def infonce_logits(z, z_hat, negatives, tau: float = DEFAULT_TAU, similarity: str = "cosine") -> np.ndarray:
    """Logit matrix with the positive in column 0 followed by one column per negative."""
    if tau <= 0:
        raise InvalidInput("temperature must be positive")
    z = _unit(np.atleast_2d(z))
    z_hat = _unit(np.atleast_2d(z_hat))
    negatives = np.asarray(negatives, dtype=np.float64).reshape(-1, z.shape[-1])
    if similarity == "cosine":
        pos = np.sum(z * z_hat, axis=-1, keepdims=True)
        neg = z @ negatives.T
    elif similarity == "poincare":
        h = geometry.exp_map0(z)
        pos = -geometry.poincare_loss(h, geometry.exp_map0(z_hat))[:, None]
        neg = -geometry.poincare_loss(h[:, None, :], geometry.exp_map0(negatives)[None, :, :])
    else:
        raise InvalidInput(f"unknown similarity {similarity!r}")
    return np.concatenate([pos, neg], axis=1) / tau


def infonce_loss(z, z_hat, queue, tau: float = DEFAULT_TAU, similarity: str = "cosine") -> np.ndarray:
    """Noise-contrastive estimation loss against a queue of negatives, row-wise.

    ``queue`` may be a :class:`NegativeQueue` or an ``(M, D)`` array.
    """
    negatives = queue.as_array() if isinstance(queue, NegativeQueue) else queue
    logits = infonce_logits(z, z_hat, negatives, tau, similarity)
    top = np.max(logits, axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.sum(np.exp(logits - top), axis=1))
    out = lse - logits[:, 0]
    return out[0] if np.ndim(z) == 1 else out
