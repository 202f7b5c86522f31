from __future__ import annotations

import math

import numpy as np
import pytest

from hopf_heat.experiments import closed_form_sas
from hopf_heat.geodesic_trig import (
    Surface,
    TriangleSpec,
    UnitTangent,
    comparison_check,
    comparison_sweep,
    constant_curvature_propagator,
    geodesic_bvp,
    geodesic_flow,
    jacobi_closed_form_gap,
    jacobi_propagator,
    parameter_derivatives,
    plane_sas_derivatives,
    rotation_flow,
    sas_identity_check,
    second_derivative_check,
    side_derivative_gap,
    solve_sas,
)

PLANE = Surface("plane")
SPHERE = Surface("unit-sphere")
BUMP = Surface("bump", amplitude=0.3, width=1.0)


def _spec(t=0.5, theta=1.2, l=0.4, u=UnitTangent(0.1, -0.2, 0.3)):
    return TriangleSpec(t, theta, l, u)


class TestSurface:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            Surface("torus")

    def test_bad_width(self):
        with pytest.raises(ValueError):
            Surface("bump", width=0.0)

    def test_sphere_has_unit_curvature(self, rng):
        x, y = rng.uniform(-2, 2, (2, 20))
        assert np.allclose(SPHERE.curvature(x, y), 1.0)

    def test_plane_is_flat(self):
        assert float(PLANE.curvature(0.3, 0.4)) == 0.0

    def test_bump_curvature_varies(self):
        assert BUMP.constant_curvature is None
        centre = float(BUMP.curvature(0.0, 0.0))
        assert centre == pytest.approx(math.exp(-0.6) * 4 * 0.3)
        assert float(BUMP.curvature(1.5, 0.0)) < 0.0

    def test_sphere_distance(self):
        # stereographic images of the south pole and a point on the equator
        assert SPHERE.distance((0.0, 0.0), (1.0, 0.0)) == pytest.approx(math.pi / 2)


class TestFlows:
    def test_plane_geodesic_is_straight(self):
        end = geodesic_flow(PLANE, UnitTangent(0.0, 0.0, 0.3), 2.0)
        assert end.x == pytest.approx(2 * math.cos(0.3), abs=1e-10)
        assert end.y == pytest.approx(2 * math.sin(0.3), abs=1e-10)
        assert end.phi == pytest.approx(0.3, abs=1e-10)

    def test_unit_speed_on_sphere(self):
        u = UnitTangent(0.2, 0.1, 1.0)
        for t in (0.3, 1.0, 1.5):
            assert SPHERE.distance(u.point, geodesic_flow(SPHERE, u, t).point) == pytest.approx(t, abs=1e-9)

    @pytest.mark.parametrize("surface", [SPHERE, BUMP])
    def test_flow_reverses(self, surface):
        u = UnitTangent(0.2, -0.1, 2.0)
        back = geodesic_flow(surface, geodesic_flow(surface, u, 0.8), -0.8)
        assert back.x == pytest.approx(u.x, abs=1e-9)
        assert back.y == pytest.approx(u.y, abs=1e-9)
        assert back.phi == pytest.approx(u.phi, abs=1e-9)

    def test_flow_composes(self):
        u = UnitTangent(0.0, 0.3, -1.0)
        two = geodesic_flow(BUMP, geodesic_flow(BUMP, u, 0.4), 0.5)
        one = geodesic_flow(BUMP, u, 0.9)
        assert np.allclose([two.x, two.y, two.phi], [one.x, one.y, one.phi], atol=1e-9)

    def test_full_rotation(self):
        u = UnitTangent(0.1, 0.2, 0.7)
        r = rotation_flow(u, 2 * math.pi)
        assert r.phi == pytest.approx(u.phi, abs=1e-14)
        assert rotation_flow(rotation_flow(u, 0.4), 0.5).phi == pytest.approx(rotation_flow(u, 0.9).phi)

    def test_unit_norm(self):
        assert UnitTangent(0.4, -0.3, 1.1).metric_norm(BUMP) == pytest.approx(1.0)


class TestJacobi:
    @pytest.mark.parametrize("k", [0.0, 1.0, -1.0])
    def test_closed_form_is_unimodular(self, k):
        assert np.linalg.det(constant_curvature_propagator(k, 0.7)) == pytest.approx(1.0)

    def test_numeric_matches_closed_form(self):
        u = UnitTangent(0.3, -0.2, 0.5)
        num = jacobi_propagator(SPHERE, u, 0.7, closed_form=False)
        assert np.allclose(num, jacobi_propagator(SPHERE, u, 0.7), atol=1e-8)

    @pytest.mark.parametrize("surface", [PLANE, SPHERE], ids=["plane", "sphere"])
    def test_closed_form_gap(self, surface):
        for t in (0.2, 0.5, 0.9):
            assert jacobi_closed_form_gap(surface, UnitTangent(0.3, -0.2, 0.5), t) <= 1e-8

    def test_closed_form_gap_needs_constant_curvature(self):
        with pytest.raises(ValueError, match="bump"):
            jacobi_closed_form_gap(BUMP, UnitTangent(0.1, 0.1, 0.0), 0.6)

    def test_bump_is_unimodular(self):
        h = jacobi_propagator(BUMP, UnitTangent(0.1, 0.1, 0.0), 0.6)
        assert np.linalg.det(h) == pytest.approx(1.0, abs=1e-9)

    def test_negative_length(self):
        with pytest.raises(ValueError):
            jacobi_propagator(PLANE, UnitTangent(0, 0, 0), -0.1)


class TestTriangleSpec:
    def test_sides_positive(self):
        with pytest.raises(ValueError):
            _spec(l=0.0)

    @pytest.mark.parametrize("theta", [0.0, -0.5, 4.0])
    def test_angle_range(self, theta):
        with pytest.raises(ValueError):
            _spec(theta=theta)

    def test_straight_angle_allowed(self):
        assert _spec(theta=math.pi).theta == math.pi

    def test_replace(self):
        assert _spec().replace(l=0.2).l == 0.2


class TestSolveSas:
    def test_right_isosceles(self):
        sol = solve_sas(PLANE, TriangleSpec(0.5, math.pi / 2, 0.5, UnitTangent(0, 0, 0)))
        assert sol.b == pytest.approx(math.sqrt(0.5), abs=1e-10)
        assert sol.alpha == pytest.approx(math.pi / 4, abs=1e-10)
        assert sol.gamma == pytest.approx(math.pi / 4, abs=1e-10)

    @pytest.mark.parametrize("surface,tol", [(PLANE, 1e-10), (SPHERE, 1e-8)])
    def test_law_of_cosines(self, surface, tol, rng):
        for _ in range(10):
            t, l = rng.uniform(0.2, 0.9, 2)
            spec = TriangleSpec(float(t), float(rng.uniform(0.5, 2.8)), float(l),
                                UnitTangent(*rng.uniform(-0.3, 0.3, 2), float(rng.uniform(-3, 3))))
            sol = solve_sas(surface, spec, verify=False)
            b, alpha, gamma = closed_form_sas(surface.kind, spec.t, spec.theta, spec.l)
            assert abs(sol.b - b) <= tol
            assert abs(sol.alpha - alpha) <= tol
            assert abs(sol.gamma - gamma) <= tol

    def test_shooting_agrees_on_sphere(self):
        sol = solve_sas(SPHERE, _spec())
        assert sol.shooting is not None
        assert sol.disagreement <= 1e-5

    def test_shooting_agrees_on_bump(self):
        sol = solve_sas(BUMP, _spec(t=0.3, l=0.25))
        assert sol.disagreement <= 1e-5

    def test_side_bound(self):
        with pytest.raises(ValueError):
            solve_sas(SPHERE, _spec(t=1.0))

    def test_bvp_on_sphere(self):
        psi, length, _ = geodesic_bvp(SPHERE, (0.0, 0.0), (0.5, 0.0))
        assert length == pytest.approx(SPHERE.distance((0.0, 0.0), (0.5, 0.0)), abs=1e-9)
        assert psi == pytest.approx(0.0, abs=1e-9)


class TestIdentities:
    def test_plane_closed_form(self):
        assert sas_identity_check(PLANE, _spec(), "ii", closed_form=True) <= 1e-9

    def test_plane_derivatives_match_finite_differences(self):
        spec = _spec()
        assert np.allclose(parameter_derivatives(PLANE, spec),
                           plane_sas_derivatives(spec.t, spec.theta, spec.l), atol=1e-6)

    @pytest.mark.parametrize("surface", [PLANE, SPHERE])
    @pytest.mark.parametrize("which", ["i", "ii"])
    def test_space_forms(self, surface, which):
        assert sas_identity_check(surface, _spec(), which) <= 1e-5

    def test_unknown_identity(self):
        with pytest.raises(ValueError):
            sas_identity_check(PLANE, _spec(), "iii")


class TestSideDerivatives:
    @pytest.mark.parametrize("surface", [PLANE, SPHERE])
    def test_first_derivative_is_cos_gamma(self, surface):
        assert side_derivative_gap(surface, _spec()) <= 1e-6

    def test_plane_second_derivative_is_two(self):
        res = second_derivative_check(PLANE, _spec())
        assert res.value == pytest.approx(2.0, abs=1e-9)
        assert res.flag

    def test_sphere_second_derivative(self):
        res = second_derivative_check(SPHERE, _spec())
        assert res.flag
        assert res.value == pytest.approx(res.finite_difference, abs=1e-3)


class TestComparison:
    def test_plane_is_exact(self):
        res = comparison_check(PLANE, (0.0, 0.0), (0.3, 0.1), (0.1, 0.25), 0.4)
        assert res.ratio == pytest.approx(1.0, abs=1e-8)
        assert res.flag

    def test_sphere_single(self):
        assert comparison_check(SPHERE, (0.0, 0.0), (0.2, 0.05), (0.05, 0.15), 0.3).flag

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            comparison_check(PLANE, (0.0, 0.0), (1.0, 0.0), (0.0, 1.0), 1.5)

    def test_plane_sweep(self, rng):
        sweep = comparison_sweep("plane", rng, 1000, 0.3)
        assert sweep.ok
        assert sweep.infimum == pytest.approx(1.0, abs=1e-6)

    def test_sphere_sweep(self, rng):
        sweep = comparison_sweep("unit-sphere", rng, 1000, 0.3)
        assert sweep.ok
        assert sweep.infimum > 0.25

    def test_sweep_needs_space_form(self, rng):
        with pytest.raises(ValueError):
            comparison_sweep("bump", rng, 10, 0.3)
