from __future__ import annotations

import math

import numpy as np
import pytest

from hopf_heat.levi_iteration import (
    GridMismatchError,
    KernelGrid,
    LeviContext,
    convolution_bound_check,
    degree_block_leak,
    exact_kernel_on_grid,
    fit_factorial_decay,
    iteration_report,
    k0_envelope_fit,
    levi_sum,
    reconstruct_G,
    spacetime_convolve,
    theta_series_kernel,
    truncated_convolution_log,
)
from hopf_heat.manifolds import ModelManifold, vector_field


def _constant_grid(steps=8, size=2, weight=0.5, value=1.0):
    nodes = np.linspace(0.0, 1.0, steps + 1)
    values = np.broadcast_to(value * np.eye(size), (steps + 1, size, size)).copy()
    return KernelGrid(nodes, values, weight, 1)


@pytest.fixture(scope="module")
def small_context():
    m = ModelManifold.torus(1, 16)
    return LeviContext(m, vector_field("circle-sin", m), 1.0, 0.25, steps=8)


class TestKernelGrid:
    def test_shape_mismatch(self):
        with pytest.raises(GridMismatchError):
            KernelGrid(np.linspace(0, 1, 4), np.zeros((3, 2, 2)), 1.0, 1)

    def test_nodes_increase(self):
        with pytest.raises(ValueError):
            KernelGrid(np.array([0.0, 0.5, 0.5]), np.zeros((3, 2, 2)), 1.0, 1)

    def test_block_norms(self):
        g = KernelGrid(np.array([0.0, 1.0]), np.full((2, 4, 4), 1.0), 1.0, 2)
        assert g.block_norms().shape == (2, 2, 2)
        assert g.sup_norm() == pytest.approx(2.0)


class TestConvolution:
    def test_constant_kernels(self):
        a = _constant_grid()
        out = spacetime_convolve(a, a)
        for k, nu in enumerate(a.nodes):
            assert np.allclose(out.values[k], nu * 0.5 * np.eye(2), atol=1e-14)

    def test_circle_heat_kernels_compose(self):
        points = 64
        h = 2 * math.pi / points
        x = h * np.arange(points)
        nodes = np.linspace(0.0, 0.5, 17)
        values = np.stack([np.eye(points) / h] + [theta_series_kernel(nu, x[:, None] - x[None, :])
                                                  for nu in nodes[1:]])
        g = KernelGrid(nodes, values, h, 1)
        out = spacetime_convolve(g, g)
        for k, nu in enumerate(nodes):
            assert np.allclose(out.values[k], nu * values[k], rtol=1e-9, atol=1e-10)

    def test_weight_mismatch(self):
        with pytest.raises(GridMismatchError):
            spacetime_convolve(_constant_grid(weight=0.5), _constant_grid(weight=0.25))

    def test_node_mismatch(self):
        with pytest.raises(GridMismatchError):
            spacetime_convolve(_constant_grid(steps=8), _constant_grid(steps=4))

    def test_nonuniform_grid(self):
        nodes = np.array([0.0, 0.1, 0.3, 1.0])
        g = KernelGrid(nodes, np.zeros((4, 2, 2)), 1.0, 1)
        with pytest.raises(GridMismatchError):
            spacetime_convolve(g, g)


class TestLeviSum:
    def test_zero_kernel_converges_at_once(self):
        series = levi_sum(_constant_grid(value=0.0))
        assert series.converged
        assert series.terms == 1
        assert series.norms == (0.0,)

    def test_fixed_truncation(self):
        series = levi_sum(_constant_grid(value=0.5), terms=3)
        assert series.terms == 3
        assert len(series.norms) == 3

    def test_alternating_signs(self):
        k0 = _constant_grid(value=0.5)
        series = levi_sum(k0, terms=2)
        k1 = spacetime_convolve(k0, k0)
        assert np.allclose(series.kernel.values, -k0.values + k1.values)

    def test_rejects_zero_terms(self):
        with pytest.raises(ValueError):
            levi_sum(_constant_grid(), terms=0)


class TestFactorialFit:
    def test_planted_constants(self):
        tau = 0.25
        norms = [2.0 * (3.0 * tau) ** m / math.factorial(m) for m in range(6)]
        fit = fit_factorial_decay(norms, tau)
        assert fit.a == pytest.approx(2.0, rel=1e-10)
        assert fit.b == pytest.approx(3.0, rel=1e-10)
        assert fit.residual < 1e-10

    def test_single_norm(self):
        fit = fit_factorial_decay([4.0], 0.1)
        assert fit.a == 4.0
        assert fit.b == 0.0

    def test_inflated_first_term_is_left_out(self):
        tau = 0.25
        norms = [2.0 * (3.0 * tau) ** m / math.factorial(m) for m in range(6)]
        norms[0] *= 50.0
        fit = fit_factorial_decay(norms, tau)
        assert fit.a == pytest.approx(2.0, rel=1e-10)
        assert fit.b == pytest.approx(3.0, rel=1e-10)
        assert fit.residual < 1e-10
        assert fit.bound == pytest.approx(100.0, rel=1e-10)

    def test_bound_covers_every_term(self):
        tau = 0.25
        norms = [1.12, 9.6e-3, 1.3e-4, 9.2e-7, 4.6e-9]
        fit = fit_factorial_decay(norms, tau)
        envelope = [fit.bound * (fit.b * tau) ** m / math.factorial(m) for m in range(len(norms))]
        assert all(v <= e * (1 + 1e-12) for v, e in zip(norms, envelope))
        assert fit.bound >= norms[0]

    def test_short_series_falls_back_to_all_terms(self):
        fit = fit_factorial_decay([3.0, 1.5], 0.5)
        assert fit.a == pytest.approx(3.0)
        assert fit.b == pytest.approx(1.0)
        assert fit.residual == pytest.approx(0.0, abs=1e-12)


class TestThetaSeries:
    def test_unit_mass(self):
        x = 2 * math.pi * np.arange(256) / 256
        assert float(np.sum(theta_series_kernel(0.1, x))) * (2 * math.pi / 256) == pytest.approx(1.0, abs=1e-12)

    def test_short_time_is_gaussian(self):
        tau, d = 0.01, 0.1
        gauss = math.exp(-d * d / (4 * tau)) / math.sqrt(4 * math.pi * tau)
        assert float(theta_series_kernel(tau, d)) == pytest.approx(gauss, rel=1e-12)


class TestLeviContext:
    def test_requires_torus(self):
        m = ModelManifold.sphere(8, 16)
        with pytest.raises(ValueError):
            LeviContext(m, vector_field("sphere-height", m), 1.0, 0.25)

    def test_requires_positive_tau(self):
        m = ModelManifold.torus(1, 8)
        with pytest.raises(ValueError):
            LeviContext(m, vector_field("circle-sin", m), 1.0, 0.0)

    def test_initial_nodes(self, small_context):
        ctx = small_context
        assert np.array_equal(ctx.parametrix_matrix(0.0), np.eye(ctx.dim) / ctx.weight)
        assert not np.any(ctx.k0_grid().values[0])

    def test_parametrix_preserves_degree(self, small_context):
        assert degree_block_leak(small_context.parametrix_grid()) == 0.0

    def test_reconstruction_and_report(self, small_context):
        ctx = small_context
        series = levi_sum(ctx.k0_grid(), terms=4)
        g = reconstruct_G(ctx, series.kernel)
        assert np.array_equal(g.values[0], ctx.parametrix_matrix(0.0))
        report = iteration_report(ctx, series, g, refine=2)
        assert report.terms == 4
        assert set(report.defects) == {"levi_vs_exact", "supertrace", "heat_residual"}
        assert np.all(np.isfinite(list(report.defects.values())))

    def test_exact_kernel_is_symmetric(self, small_context):
        exact = exact_kernel_on_grid(small_context, refine=2)
        assert exact.shape == (small_context.dim, small_context.dim)
        assert np.allclose(exact, exact.T, atol=1e-12)

    def test_envelope_fits_at_both_ends(self, small_context):
        fits = [k0_envelope_fit(small_context, field_at=at) for at in ("source", "target")]
        assert all(f.bounded and f.c0 > 0.0 for f in fits)
        with pytest.raises(ValueError):
            k0_envelope_fit(small_context, field_at="middle")


class TestConvolutionBound:
    def test_untruncated_gaussians_compose(self):
        a1, a2, d = 0.01, 0.02, 0.1
        expected = -math.log(4 * math.pi * (a1 + a2)) - d * d / (4 * (a1 + a2))
        assert truncated_convolution_log(a1, a2, d, 2.0, 128) == pytest.approx(expected, abs=1e-6)

    def test_ratio_below_width_ratio(self, rng):
        report = convolution_bound_check(1.0, 2.0, 0.3, 5, rng, nodes=32)
        assert report.below_closed_form
        assert report.closed_form == 2.0
        assert 0.0 < report.c <= 2.0
        assert set(report.per_fraction) == {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}

    def test_rejects_unordered_widths(self, rng):
        with pytest.raises(ValueError):
            convolution_bound_check(2.0, 1.0, 0.3, 5, rng)


@pytest.fixture(scope="module")
def circle_run():
    m = ModelManifold.torus(1, 64)
    ctx = LeviContext(m, vector_field("circle-sin", m), 1.0, 0.25, steps=64)
    series = levi_sum(ctx.k0_grid())
    g = reconstruct_G(ctx, series.kernel)
    return series, iteration_report(ctx, series, g, refine=8)


class TestCircleRun:
    def test_series_converges(self, circle_run):
        series, _ = circle_run
        assert series.converged
        assert all(b < a for a, b in zip(series.norms, series.norms[1:]))

    def test_matches_refined_exact_kernel(self, circle_run):
        _, report = circle_run
        assert report.defects["levi_vs_exact"] <= 1e-3
        assert abs(report.defects["supertrace"]) <= 1e-2

    def test_norms_follow_factorial_decay(self, circle_run):
        _, report = circle_run
        assert report.fit.residual <= 0.3
        assert math.isfinite(report.fit.bound)
        assert report.fit.bound >= report.norms[0]
        assert report.tail_estimate < 1e-6

    def test_weak_heat_residual(self, circle_run):
        _, report = circle_run
        assert report.defects["heat_residual"] <= 1e-2

    def test_zero_field_diagonal_is_theta_series(self):
        m = ModelManifold.torus(1, 64)
        ctx = LeviContext(m, vector_field("circle-zero", m), 1.0, 0.25, steps=64)
        series = levi_sum(ctx.k0_grid())
        g = reconstruct_G(ctx, series.kernel)
        report = iteration_report(ctx, series, g, refine=2, theta_check=True)
        assert report.defects["theta_series"] <= 1e-6
