import math
import warnings
from decimal import Decimal, getcontext

import numpy as np
import pytest

from hysp_lab import geometry
from hysp_lab.autodiff import finite_difference_gradient
from hysp_lab.errors import AtMinimum, InvalidInput


def ball_points(rng, n, d, lo=0.05, hi=0.95):
    v = rng.standard_normal((n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(lo, hi, size=(n, 1))


def tanh_decimal(x):
    # independent high-precision tanh for the exp-map oracle
    getcontext().prec = 40
    e = Decimal(2 * x).exp()
    return (e - 1) / (e + 1)


class TestProjection:
    def test_origin_stays(self):
        assert np.array_equal(geometry.project_to_ball(np.zeros(4)), np.zeros(4))

    def test_outside_point_is_pulled_to_clamp(self):
        v = np.array([1.2, 1.6])  # norm 2
        out = geometry.project_to_ball(v)
        assert np.linalg.norm(out) == pytest.approx(0.99999, abs=1e-15)
        assert np.allclose(out / np.linalg.norm(out), v / 2)

    def test_interior_point_unchanged(self):
        v = np.array([0.3, 0.4])
        assert np.array_equal(geometry.project_to_ball(v), v)

    def test_rejects_nan(self):
        with pytest.raises(InvalidInput):
            geometry.project_to_ball([np.nan, 0.0])


class TestExpMap:
    def test_origin(self):
        assert np.array_equal(geometry.exp_map0(np.zeros(5)), np.zeros(5))

    def test_axis_vector_against_decimal_tanh(self):
        out = geometry.exp_map0(np.array([0.5, 0.0, 0.0]))
        assert out[0] == pytest.approx(float(tanh_decimal(0.5)), abs=1e-15)
        assert np.all(out[1:] == 0)
        assert out[0] == pytest.approx(0.4621171573, abs=1e-10)

    def test_curvature_quarter(self):
        z = np.array([0.0, 2.0])
        out = geometry.exp_map0(z, c=0.25)
        # tanh(1) / 0.5 = 1.5231883...
        assert np.linalg.norm(out) == pytest.approx(float(tanh_decimal(1.0)) / 0.5, abs=1e-14)
        assert np.linalg.norm(out) < 2.0

    def test_large_input_clamped(self):
        out = geometry.exp_map0(np.array([1e6, 0.0]))
        assert np.linalg.norm(out) <= geometry.max_norm()

    def test_bad_curvature(self):
        with pytest.raises(InvalidInput):
            geometry.exp_map0(np.ones(2), c=0.0)


class TestDistance:
    def test_identity(self, rng):
        h = ball_points(rng, 10, 6)
        assert np.all(geometry.poincare_loss(h, h) == 0.0)

    def test_origin_to_half(self):
        d = geometry.poincare_loss(np.zeros(2), np.array([0.5, 0.0]))
        assert d == pytest.approx(math.log(3.0), abs=1e-12)
        assert d == pytest.approx(math.acosh(5.0 / 3.0), abs=1e-12)

    def test_symmetric(self, rng):
        h, g = ball_points(rng, 100, 8), ball_points(rng, 100, 8)
        assert np.allclose(geometry.poincare_loss(h, g), geometry.poincare_loss(g, h), rtol=0, atol=1e-13)

    def test_matches_acosh_formula(self, rng):
        h, g = ball_points(rng, 50, 3), ball_points(rng, 50, 3)
        y = 1 + 2 * np.sum((h - g) ** 2, 1) / ((1 - np.sum(h * h, 1)) * (1 - np.sum(g * g, 1)))
        assert np.allclose(geometry.poincare_loss(h, g), np.arccosh(y), rtol=1e-10)

    def test_outside_ball_rejected(self):
        with pytest.raises(InvalidInput):
            geometry.poincare_loss(np.array([1.0, 0.0]), np.zeros(2))


class TestUncertainty:
    def test_origin(self):
        assert geometry.uncertainty(np.zeros(3)) == 1.0

    @pytest.mark.parametrize("radius, expected", [(0.7712, 0.2288), (0.9697, 0.0303)])
    def test_reported_radii(self, radius, expected):
        assert geometry.uncertainty(np.array([0.0, radius])) == pytest.approx(expected, abs=1e-12)


class TestRiemannianGradient:
    def test_at_minimum_warns_and_returns_zero(self):
        h = np.array([0.2, 0.1])
        with pytest.warns(AtMinimum):
            g = geometry.riemannian_grad_poincare(h, h)
        assert np.array_equal(g, np.zeros(2))

    def test_against_finite_differences(self, rng):
        worst = 0.0
        for d in (2, 8, 64):
            for _ in range(34):
                h, g = ball_points(rng, 1, d)[0], ball_points(rng, 1, d)[0]
                num = finite_difference_gradient(lambda x: geometry.poincare_loss(x, g), h)
                expected = (1 - h @ h) ** 2 / 4 * num
                got = geometry.riemannian_grad_poincare(h, g)
                worst = max(worst, np.linalg.norm(got - expected) / np.linalg.norm(expected))
        assert worst < 1e-5

    def test_norm_depends_only_on_online_radius(self, rng):
        # the distance has unit Riemannian gradient, so the vector norm is (1 - |h|^2) / 2
        h = ball_points(rng, 200, 8)
        g = ball_points(rng, 200, 8, lo=0.0, hi=0.999)
        norms = np.linalg.norm(geometry.riemannian_grad_poincare(h, g), axis=1)
        assert np.allclose(norms, (1 - np.sum(h * h, 1)) / 2, rtol=1e-12)

    @pytest.mark.xfail(strict=True, reason="norm is (1-|h|^2)/2 for every target; see test above")
    def test_norm_grows_with_target_radius(self):
        h = np.array([0.5, 0.0])
        radii = np.round(np.arange(0.1, 1.0, 0.01), 2)
        norms = [np.linalg.norm(geometry.riemannian_grad_poincare(h, np.array([0.0, r]))) for r in radii]
        assert np.all(np.diff(norms) > 0)

    def test_curvature_general(self, rng):
        c = 0.5
        h, g = ball_points(rng, 1, 4, hi=1.2)[0], ball_points(rng, 1, 4, hi=1.2)[0]
        num = finite_difference_gradient(lambda x: geometry.poincare_loss(x, g, c), h)
        expected = (1 - c * h @ h) ** 2 / 4 * num
        assert np.allclose(geometry.riemannian_grad_poincare(h, g, c), expected, rtol=1e-6, atol=1e-10)


class TestRsgd:
    def test_zero_grad(self):
        x = np.array([0.1, -0.3])
        assert np.array_equal(geometry.rsgd_step(x, np.zeros(2), 0.1), x)

    def test_origin_is_quarter_scaled_descent(self):
        g = np.array([0.4, -0.2])
        assert np.allclose(geometry.rsgd_step(np.zeros(2), g, 0.5), -0.5 * g / 4)

    def test_converges_toward_target(self, rng):
        # a distance has a kink at its minimum, so only check while farther than one step
        lr = 0.01
        for _ in range(20):
            target = ball_points(rng, 1, 4)[0]
            x = ball_points(rng, 1, 4)[0]
            losses = []
            for _ in range(200):
                d = float(geometry.poincare_loss(x, target))
                if d < 4 * lr:
                    break
                losses.append(d)
                num = finite_difference_gradient(lambda v: geometry.poincare_loss(v, target), x)
                x = geometry.rsgd_step(x, num, lr)
            assert len(losses) > 1 and np.all(np.diff(losses) < 0)

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(InvalidInput):
            geometry.rsgd_step(np.zeros(2), np.ones(2), 0.0)


def test_conformal_direction_and_cosine(rng):
    from hysp_lab.objectives import cosine_loss

    z = rng.standard_normal((200, 16)) * rng.uniform(0.01, 5, size=(200, 1))
    h = geometry.exp_map0(z)
    unit = lambda a: a / np.linalg.norm(a, axis=1, keepdims=True)
    assert np.max(np.abs(unit(h) - unit(z))) < 1e-12
    other = rng.standard_normal((200, 16))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert np.max(np.abs(cosine_loss(z, other) - cosine_loss(h, geometry.exp_map0(other)))) < 1e-10
