"""Poincare-ball primitives.

All functions accept arrays whose last axis is the embedding dimension and
broadcast over any leading batch axes. Computation is done in float64.
"""
from __future__ import annotations

import warnings

import numpy as np

from .errors import AtMinimum, InvalidInput

BALL_EPS = 1e-5
COINCIDE_EPS = 1e-12
SMALL_NORM = 1e-8


def check_curvature(c: float) -> float:
    c = float(c)
    if not np.isfinite(c) or c <= 0:
        raise InvalidInput(f"curvature must be positive and finite, got {c}")
    return c


def _as_finite(x, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput(f"{name} contains non-finite values")
    return x


def _sqnorm(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1, keepdims=True)


def max_norm(c: float = 1.0) -> float:
    """Largest admissible Euclidean norm inside the ball of curvature ``c``."""
    return (1.0 - BALL_EPS) / np.sqrt(check_curvature(c))


def project_to_ball(v, c: float = 1.0) -> np.ndarray:
    """Rescale rows of ``v`` that fall outside the clamped ball, keeping direction."""
    v = _as_finite(v)
    limit = max_norm(c)
    norm = np.sqrt(_sqnorm(v))
    scale = np.where(norm > limit, limit / np.maximum(norm, SMALL_NORM), 1.0)
    return v * scale


def exp_map0(z, c: float = 1.0) -> np.ndarray:
    """Exponential map at the origin: ``tanh(sqrt(c)|z|) z / (sqrt(c)|z|)``.

    The origin maps to itself; the result is projected into the clamped ball.
    """
    z = _as_finite(z)
    sc = np.sqrt(check_curvature(c))
    r = sc * np.sqrt(_sqnorm(z))
    safe = np.where(r > 0, r, 1.0)
    factor = np.where(r > 0, np.tanh(safe) / safe, 1.0)
    return project_to_ball(z * factor, c)


def poincare_loss(h, h_hat, c: float = 1.0) -> np.ndarray:
    """Poincare geodesic distance between ``h`` and ``h_hat`` (row-wise).

    Evaluated as ``acosh(1 + y) = log1p(y + sqrt(y (y + 2)))`` with ``y >= 0``,
    which is exact at ``h == h_hat`` and avoids cancellation for close points.
    """
    h = _as_finite(h, "h")
    h_hat = _as_finite(h_hat, "h_hat")
    if h.shape[-1:] != h_hat.shape[-1:]:
        raise InvalidInput(f"dimension mismatch: {h.shape} vs {h_hat.shape}")
    c = check_curvature(c)
    a = 1.0 - c * _sqnorm(h)[..., 0]
    b = 1.0 - c * _sqnorm(h_hat)[..., 0]
    if np.any(a <= 0) or np.any(b <= 0):
        raise InvalidInput("points must lie strictly inside the ball")
    diff = h - h_hat
    y = np.maximum(2.0 * c * np.sum(diff * diff, axis=-1) / (a * b), 0.0)
    return np.log1p(y + np.sqrt(y * (y + 2.0))) / np.sqrt(c)


def uncertainty(h_hat, c: float = 1.0) -> np.ndarray:
    """Radius-based uncertainty ``1 - sqrt(c)|h_hat|``; in [0, 1] inside the ball."""
    h_hat = _as_finite(h_hat)
    return 1.0 - np.sqrt(check_curvature(c)) * np.linalg.norm(h_hat, axis=-1)


def metric_scale(x, c: float = 1.0) -> np.ndarray:
    """Inverse metric factor ``(1 - c|x|^2)^2 / 4`` turning Euclidean into Riemannian gradients."""
    x = np.asarray(x, dtype=np.float64)
    return (1.0 - check_curvature(c) * _sqnorm(x)) ** 2 / 4.0


def riemannian_grad_poincare(h, h_hat, c: float = 1.0) -> np.ndarray:
    """Closed-form Riemannian gradient of :func:`poincare_loss` with respect to ``h``.

    For ``c = 1``::

        (1-|h|^2)^2 / (2 sqrt((1-|h|^2)(1-|h_hat|^2) + |h-h_hat|^2))
            * ((h - h_hat)/|h - h_hat| + h |h - h_hat| / (1-|h|^2))

    Rows where ``h`` and ``h_hat`` coincide get a zero vector and an
    :class:`AtMinimum` warning is emitted.
    """
    h = _as_finite(h, "h")
    h_hat = _as_finite(h_hat, "h_hat")
    c = check_curvature(c)
    h, h_hat = np.broadcast_arrays(h, h_hat)
    a = 1.0 - c * _sqnorm(h)
    b = 1.0 - c * _sqnorm(h_hat)
    diff = h - h_hat
    w = np.sqrt(_sqnorm(diff))
    coincide = w <= COINCIDE_EPS
    safe_w = np.where(coincide, 1.0, w)
    pref = a * a / (2.0 * np.sqrt(a * b + c * w * w))
    grad = pref * (diff / safe_w + c * h * w / a)
    if np.any(coincide):
        warnings.warn("h coincides with h_hat; gradient set to zero", AtMinimum, stacklevel=2)
        grad = np.where(coincide, 0.0, grad)
    return grad


def rsgd_step(x, euclid_grad, lr: float, c: float = 1.0) -> np.ndarray:
    """One Riemannian SGD step using the projection retraction."""
    x = _as_finite(x, "x")
    g = _as_finite(euclid_grad, "euclid_grad")
    if not lr > 0:
        raise InvalidInput(f"learning rate must be positive, got {lr}")
    return project_to_ball(x - lr * metric_scale(x, c) * g, c)
