"""Finite-difference checks for every differentiable primitive.

Each check builds a scalar ``sum(out * w)`` with a fixed random weighting
``w`` so that every output element contributes, then compares the tape
gradient against central differences.
"""
from __future__ import annotations

import time
import warnings

import numpy as np

from . import autodiff as ad
from . import geometry
from .data import stream

GRADCHECK_PURPOSE = 99
TOLERANCE = 1e-4


def _ball_points(rng, n: int, d: int, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(lo, hi, size=(n, 1))


def _cases(rng):
    """name -> (function of the checked inputs, list of inputs)."""
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((4, 5))
    adj = np.abs(rng.standard_normal((4, 4)))
    adj = (adj + adj.T) / adj.sum(axis=1).max() / 2
    # keep relu inputs away from the kink
    r = rng.standard_normal((3, 4))
    r = np.where(np.abs(r) < 0.05, 0.5, r)
    z = rng.standard_normal((4, 6)) * 0.7
    h = _ball_points(rng, 4, 6)
    h_hat = _ball_points(rng, 4, 6)
    labels = rng.integers(0, 5, size=3)
    return {
        "matmul": (lambda a, b: ad.matmul(a, b), [x, y]),
        "add": (lambda a, b: ad.add(a, b), [x, rng.standard_normal(4)]),
        "mul_const": (lambda a: ad.mul_const(a, 1.7), [x]),
        "relu": (lambda a: ad.relu(a), [r]),
        "tanh": (lambda a: ad.tanh(a), [x]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [x, rng.standard_normal((3, 2))]),
        "sum": (lambda a: ad.sum_(a, axis=1), [x]),
        "mean": (lambda a: ad.mean(a, axis=0), [x]),
        "reshape": (lambda a: ad.reshape(a, (2, 6)), [x]),
        "conv_time": (lambda a, w, b: ad.conv_time(a, w, b),
                      [rng.standard_normal((2, 5, 3, 2)), rng.standard_normal((3, 2, 4)), rng.standard_normal(4)]),
        "graph_agg": (lambda a: ad.graph_agg(a, adj), [rng.standard_normal((2, 3, 4, 2))]),
        "l2_normalize": (lambda a: ad.l2_normalize(a), [x]),
        "batch_norm": (lambda a, g, b: ad.batch_norm(a, g, b),
                       [rng.standard_normal((6, 4)), rng.uniform(0.5, 1.5, 4), rng.standard_normal(4)]),
        "exp_map0": (lambda a: ad.exp_map0(a), [z]),
        "exp_map0_small": (lambda a: ad.exp_map0(a), [z * 1e-4]),
        "poincare_loss": (lambda a, b: ad.poincare_loss(a, b), [h, h_hat]),
        "cosine_loss": (lambda a, b: ad.cosine_loss(a, b), [h, h_hat]),
        "softmax_cross_entropy": (lambda a: ad.softmax_cross_entropy(a, labels), [rng.standard_normal((3, 5))]),
        "hysp_composite": (_composite(rng), [rng.standard_normal((4, 3)) * 0.5]),
    }


def _composite(rng):
    """Small projector, map into the ball and the mixed objective."""
    w1 = rng.standard_normal((3, 5)) * 0.5
    w2 = rng.standard_normal((5, 6)) * 0.5
    target = geometry.exp_map0(rng.standard_normal((4, 6)) * 0.5)

    def f(x):
        z = ad.matmul(ad.tanh(ad.matmul(x, w1)), w2)
        h = ad.exp_map0(z)
        a = 0.4
        return ad.add(ad.mul_const(ad.mean(ad.poincare_loss(h, target)), a),
                      ad.mul_const(ad.mean(ad.cosine_loss(h, target)), 1 - a))
    return f


def check_primitive(fn, inputs, rng) -> float:
    """Max relative error over all inputs between tape and numeric gradients."""
    tensors = [ad.Tensor(v, requires_grad=True) for v in inputs]
    with ad.no_grad():
        weight = rng.standard_normal(fn(*inputs).shape)
    with ad.Tape() as tape:
        out = fn(*tensors)
        loss = ad.sum_(ad.mul_const(out, weight))
    ad.backward(tape, loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        def scalar(v, i=i):
            args = list(inputs)
            args[i] = v
            with ad.no_grad():
                return float(np.sum(fn(*args).data * weight))

        num = ad.finite_difference_gradient(scalar, inputs[i])
        worst = max(worst, ad.relative_error(t.grad, num))
    return worst


def run_primitive_suite(seeds=range(20)) -> dict[str, float]:
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = stream(seed, GRADCHECK_PURPOSE)
        for name, (fn, inputs) in _cases(rng).items():
            worst[name] = max(worst.get(name, 0.0), check_primitive(fn, inputs, rng))
    return worst


def closed_form_oracle(n_pairs: int = 1000, dims=(2, 8, 64), seed: int = 0, step: float = 1e-6):
    """Closed-form Riemannian gradient against metric-scaled central differences.

    Returns ``(max relative error, seconds)``.
    """
    start = time.perf_counter()
    rng = stream(seed, GRADCHECK_PURPOSE, 1)
    worst = 0.0
    for k in range(n_pairs):
        d = dims[k % len(dims)]
        h = _ball_points(rng, 1, d)[0]
        h_hat = _ball_points(rng, 1, d)[0]
        eye = np.eye(d) * step
        plus = geometry.poincare_loss(h + eye, np.broadcast_to(h_hat, (d, d)))
        minus = geometry.poincare_loss(h - eye, np.broadcast_to(h_hat, (d, d)))
        numeric = geometry.metric_scale(h) * (plus - minus) / (2 * step)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=geometry.AtMinimum)
            closed = geometry.riemannian_grad_poincare(h, h_hat)
        worst = max(worst, ad.relative_error(closed, numeric))
    return worst, time.perf_counter() - start


def run_all(seeds=range(20)) -> list[tuple[str, float, bool]]:
    """Rows of ``(check, max relative error, passed)``."""
    rows = [(name, err, err < TOLERANCE) for name, err in run_primitive_suite(seeds).items()]
    err, _ = closed_form_oracle()
    rows.append(("riemannian_closed_form", err, err < 1e-5))
    return rows


def format_table(rows) -> str:
    width = max(len(r[0]) for r in rows)
    lines = [f"{'check':<{width}}  max_rel_err  status"]
    lines += [f"{name:<{width}}  {err:11.3e}  {'ok' if ok else 'FAIL'}" for name, err, ok in rows]
    return "\n".join(lines)
