from __future__ import annotations

import math

import numpy as np
import pytest

from hopf_heat.exterior_algebra import ExteriorOperator, supertrace
from hopf_heat.mehler_kernel import (
    ChartError,
    CutoffSpec,
    FrameData,
    GaussianKernel,
    KernelDomainError,
    KernelParams,
    MehlerPhi,
    delta_family_error,
    fit_gaussian_envelope,
    gaussian_bound_check,
    gaussian_log_bounds,
    log_phi,
    log_q,
    operator_norm,
    parametrix,
    phi0,
    phi0_forms,
    phi0_point,
    phi0_supertrace_batch,
    residual_order,
    sample_parametrix_envelope,
    scalar_mehler,
    scalar_mehler_residual,
)


class TestKernelParams:
    def test_rejects_nonpositive_tau(self):
        with pytest.raises(KernelDomainError):
            KernelParams(0.0)
        with pytest.raises(KernelDomainError):
            KernelParams(-1.0, 1.0)

    def test_rejects_negative_t(self):
        with pytest.raises(KernelDomainError):
            KernelParams(0.1, -0.5)

    def test_from_s(self):
        p = KernelParams.from_s(0.25, 0.5)
        assert p.t == 2.0
        assert p.s == pytest.approx(0.5)

    def test_gaussian_width(self):
        with pytest.raises(KernelDomainError):
            GaussianKernel(0.0, 2)

    def test_frame_shape(self):
        with pytest.raises(ValueError):
            FrameData(np.zeros(2), np.zeros((3, 3)))


class TestScalarMehler:
    def test_heat_equation_residual(self):
        assert scalar_mehler_residual(0.3, 0.4, -0.2, 1.5, 1e-3) < 1e-5

    def test_zero_field_is_heat_kernel(self):
        tau, y, x = 0.2, 0.7, -0.1
        heat = math.exp(-((x - y) ** 2) / (4 * tau)) / math.sqrt(4 * math.pi * tau)
        assert float(scalar_mehler(tau, y, x, 0.0)) == pytest.approx(heat, rel=1e-13)

    def test_one_dimensional_phi_is_scalar_chain(self, rng):
        for _ in range(100):
            tau = float(rng.uniform(0.05, 1.5))
            y, x = rng.normal(size=2)
            b = float(rng.uniform(0.1, 2.0))
            expected = math.log(float(scalar_mehler(tau, y, x, b)))
            got = float(log_phi(tau, np.array([y - x]), np.array([x * b]), np.array([[b]])))
            assert abs(got - expected) <= 1e-10 * max(1.0, abs(expected))


class TestMehlerPhi:
    def test_zero_b_reduces_to_damped_heat_kernel(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 4))
            tau = float(rng.uniform(0.05, 2.0))
            y, a = rng.normal(size=n), rng.normal(size=n)
            expected = float(log_q(tau, y @ y, n)) - tau * float(a @ a)
            got = float(log_phi(tau, y, a, np.zeros((n, n))))
            assert abs(got - expected) <= 1e-13 * max(1.0, abs(expected))

    def test_batched_matches_single(self, rng):
        tau = 0.4
        a = rng.normal(size=(3, 2))
        b = rng.normal(size=(3, 2, 2))
        y = rng.normal(size=(3, 5, 2))
        out = MehlerPhi(tau, a, b).log_value(y)
        assert out.shape == (3, 5)
        for k in range(3):
            assert np.allclose(out[k], MehlerPhi(tau, a[k], b[k]).log_value(y[k]), rtol=1e-12, atol=1e-12)

    def test_grad_log_matches_finite_difference(self, rng):
        ev = MehlerPhi(0.3, rng.normal(size=2), rng.normal(size=(2, 2)))
        y = rng.normal(size=2)
        h = 1e-6
        fd = np.array([(ev.log_value(y + h * e) - ev.log_value(y - h * e)) / (2 * h) for e in np.eye(2)])
        assert np.allclose(ev.grad_log(y), fd, atol=1e-6)

    def test_incompatible_shapes(self):
        with pytest.raises(ValueError):
            MehlerPhi(0.1, np.zeros(2), np.zeros((3, 3)))

    def test_observed_order_is_two(self, rng):
        for _ in range(5):
            order = residual_order(0.5, 0.3 * rng.normal(size=2), rng.normal(size=2),
                                         0.5 * rng.normal(size=(2, 2)))
            assert abs(order - 2.0) <= 0.4

    def test_delta_family(self):
        a = np.array([1.0, 0.0])
        b = 0.5 * np.eye(2)

        def f(y):
            return np.cos(np.sum(y, axis=-1))

        coarse = delta_family_error(1e-2, a, b, f)
        fine = delta_family_error(1e-4, a, b, f)
        assert fine < coarse
        assert fine < 1e-2


class TestPhi0:
    def test_three_forms_agree(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 4))
            tau = float(rng.uniform(0.05, 1.0))
            direct, form_i, form_ii = phi0_forms(tau, rng.normal(size=n), rng.normal(size=n),
                                                 rng.normal(size=(n, n)))
            scale = max(1.0, abs(form_i))
            assert abs(form_i - direct) <= 1e-8 * scale
            assert abs(form_i - form_ii) <= 1e-8 * scale

    def test_value(self):
        y, x = np.array([0.2, 0.1]), np.array([-0.3, 0.4])
        assert phi0(0.2, y, x, np.eye(2)) == pytest.approx(math.exp(phi0_forms(0.2, y, x, np.eye(2))[1]))

    def test_point_operator_matches_batch(self, rng):
        v, a = rng.normal(size=2), rng.normal(size=(2, 2))
        params = KernelParams.from_s(0.1, 0.05)
        op = phi0_point(params, FrameData(v, a))
        batch = float(phi0_supertrace_batch(params, v[None], a[None])[0])
        assert supertrace(op) == pytest.approx(batch, rel=1e-10)

    def test_undeformed_point_operator(self):
        op = phi0_point(KernelParams(0.1), FrameData(np.ones(2), np.eye(2)))
        assert op.allclose(ExteriorOperator.identity(2) * (1.0 / (0.4 * math.pi)))
        assert operator_norm(op) == pytest.approx(2.0 / (0.4 * math.pi))


class TestGaussianBounds:
    def test_both_bounds_hold(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 4))
            tau = float(rng.uniform(0.01, 2.0))
            lhs, rhs_i, rhs_ii = gaussian_log_bounds(tau, rng.normal(size=n), rng.normal(size=n),
                                                  rng.normal(size=(n, n)))
            assert lhs <= rhs_i + 1e-9 * max(1.0, abs(rhs_i))
            assert lhs <= rhs_ii + 1e-9 * max(1.0, abs(rhs_ii))

    def test_check_exponentiates_log_bounds(self, rng):
        y, a, b = rng.normal(size=2), rng.normal(size=2), rng.normal(size=(2, 2))
        logs = gaussian_log_bounds(0.3, y, a, b)
        vals = gaussian_bound_check(0.3, y, a, b)
        assert vals == pytest.approx(tuple(math.exp(x) for x in logs), rel=1e-12)
        assert vals[0] <= vals[1] * (1 + 1e-9) and vals[0] <= vals[2] * (1 + 1e-9)


class TestCutoff:
    @pytest.mark.parametrize("profile", ["quintic", "smooth"])
    def test_shape(self, profile):
        cut = CutoffSpec(1.0, 2.0, profile)
        rho = np.linspace(0.0, 3.0, 301)
        vals = cut(rho)
        assert np.all(vals[rho <= 1.0] == 1.0)
        assert np.all(vals[rho >= 2.0] == 0.0)
        assert np.all(np.diff(vals) <= 1e-15)

    @pytest.mark.parametrize("profile", ["quintic", "smooth"])
    def test_radial_derivatives(self, profile):
        cut = CutoffSpec(1.0, 2.0, profile)
        r = np.linspace(1.2, 3.8, 27)
        h = 1e-5
        f0, d1, d2 = cut.radial(r)
        fp, _, _ = cut.radial(r + h)
        fm, _, _ = cut.radial(r - h)
        assert np.allclose((fp - fm) / (2 * h), d1, atol=1e-6)
        assert np.allclose((fp - 2 * f0 + fm) / h**2, d2, atol=1e-3)

    def test_bad_radii(self):
        with pytest.raises(ValueError):
            CutoffSpec(2.0, 1.0)
        with pytest.raises(ValueError):
            CutoffSpec(1.0, 2.0, "linear")
        with pytest.raises(ValueError):
            CutoffSpec(1.0, 2.0, "smooth", sharpness=0.0)

    @pytest.mark.parametrize("sharpness", [0.5, 1.5, 4.0])
    def test_sharpened_profile(self, sharpness):
        cut = CutoffSpec(1.0, 2.0, "smooth", sharpness)
        r = np.linspace(1.2, 3.8, 27)
        h = 1e-5
        f0, d1, d2 = cut.radial(r)
        fp, _, _ = cut.radial(r + h)
        fm, _, _ = cut.radial(r - h)
        assert np.allclose((fp - fm) / (2 * h), d1, atol=1e-6)
        assert np.allclose((fp - 2 * f0 + fm) / h**2, d2, atol=1e-3)
        assert cut(math.sqrt(2.5)) == pytest.approx(0.5, abs=1e-12)

    def test_sharper_profile_is_flatter_near_ends(self):
        soft = CutoffSpec(1.0, 2.0, "smooth", 1.0)
        sharp = CutoffSpec(1.0, 2.0, "smooth", 1.5)
        near = np.sqrt([1.1, 3.9])
        assert 1.0 - sharp(near[0]) < 1.0 - soft(near[0])
        assert sharp(near[1]) < soft(near[1])

    def test_from_injectivity_carries_profile(self):
        cut = CutoffSpec.from_injectivity(math.pi, 0.3, 0.7, profile="smooth", sharpness=1.5)
        assert (cut.r1, cut.r2) == pytest.approx((0.3 * math.pi, 0.7 * math.pi))
        assert cut.sharpness == 1.5


class TestParametrix:
    def test_zero_outside_cutoff(self):
        cut = CutoffSpec(0.5, 1.0)
        frame = FrameData(np.ones(2), np.eye(2))
        out = parametrix(KernelParams(0.1, 1.0), frame, np.array([1.5, 0.0]), cut)
        assert not np.any(out.matrix)

    def test_chart_exit(self):
        with pytest.raises(ChartError):
            parametrix(KernelParams(0.1, 1.0), FrameData(np.ones(2), np.eye(2)), np.array([3.0, 0.0]),
                       CutoffSpec(0.5, 1.0), chart_radius=2.0)

    def test_undeformed_is_heat_kernel(self):
        tau = 0.1
        out = parametrix(KernelParams(tau, 0.0), FrameData(np.ones(2), np.eye(2)), np.zeros(2),
                         CutoffSpec(0.5, 1.0))
        assert np.allclose(out.matrix, np.eye(4) / (4 * math.pi * tau), rtol=1e-13)

    def test_diagonal_is_phi0_point(self, rng):
        cut = CutoffSpec(0.5, 1.0, "smooth", 1.5)
        for _ in range(50):
            n = int(rng.integers(1, 4))
            params = KernelParams(float(rng.uniform(0.05, 1.0)), float(rng.uniform(0.0, 5.0)))
            frame = FrameData(rng.normal(size=n), rng.normal(size=(n, n)))
            got = parametrix(params, frame, np.zeros(n), cut).matrix
            expected = phi0_point(params, frame).matrix
            assert np.allclose(got, expected, rtol=1e-10, atol=1e-10 * np.abs(expected).max())


class TestEnvelope:
    def test_recovers_planted_constant(self, rng):
        tau = rng.uniform(0.01, 0.5, 50)
        rho2 = rng.uniform(0.0, 1.0, 50)
        vsq = rng.uniform(0.0, 4.0, 50)
        log_norm = math.log(3.0) + log_q(2.0 * tau, rho2, 2) - tau * vsq / 2.0
        fit = fit_gaussian_envelope(log_norm, rho2, tau, vsq, 2)
        assert fit.per_c1[2.0] == pytest.approx(3.0, rel=1e-12)
        assert fit.bounded

    def test_sampled_parametrix_is_bounded(self, rng):
        data = sample_parametrix_envelope(rng, 2, 200)
        fit = fit_gaussian_envelope(data["log_norm"], data["rho2"], data["tau"], data["vsq"], 2)
        assert fit.bounded
        assert fit.c0 > 0.0
