from __future__ import annotations

import numpy as np
import pytest

from hopf_heat.matrix_functions import (
    SERIES_THRESHOLD,
    IndefiniteMatrixError,
    SpectralFunction,
    apply_spectral,
    intertwine_check,
    log_det_theta_over_sinh,
    scalar_spectral,
    sqrt_det_theta_over_sinh,
    sqrt_psd,
)


def _random_psd(rng, n=3):
    a = rng.normal(size=(n, n))
    return a @ a.T


class TestScalarSpectral:
    @pytest.mark.parametrize("f", list(SpectralFunction))
    def test_series_meets_closed_form_at_threshold(self, f):
        below = scalar_spectral(f, SERIES_THRESHOLD * (1 - 1e-9))
        above = scalar_spectral(f, SERIES_THRESHOLD * (1 + 1e-9))
        assert abs(float(below) - float(above)) < 1e-12

    def test_values_at_zero(self):
        assert float(scalar_spectral("theta/sinh", 0.0)) == 1.0
        assert float(scalar_spectral(SpectralFunction.COSH_M1_OVER_THETA_SINH, 0.0)) == 0.5
        assert float(scalar_spectral(SpectralFunction.THETA_COSH_P1_OVER_SINH, 0.0)) == 2.0

    def test_large_theta_saturates(self):
        vals = scalar_spectral(SpectralFunction.THETA_OVER_SINH, np.array([50.0, 800.0]))
        assert np.all(np.isfinite(vals))
        assert vals[1] == 0.0

    def test_even_in_theta(self):
        th = np.linspace(-3, 3, 13)
        for f in SpectralFunction:
            assert np.allclose(scalar_spectral(f, th), scalar_spectral(f, -th))

    def test_sqrt_squares_to_theta_over_sinh(self):
        th = np.array([1e-4, 0.3, 2.0, 10.0])
        sq = scalar_spectral(SpectralFunction.SQRT_THETA_OVER_SINH, th) ** 2
        assert np.allclose(sq, scalar_spectral(SpectralFunction.THETA_OVER_SINH, th), rtol=1e-12)


class TestMatrixFunctions:
    def test_sqrt_psd(self, rng):
        m = _random_psd(rng)
        r = sqrt_psd(m)
        assert np.allclose(r @ r, m, atol=1e-10)
        assert np.allclose(r, r.T)

    def test_indefinite_rejected(self):
        with pytest.raises(IndefiniteMatrixError):
            sqrt_psd(np.diag([1.0, -1.0]))

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            sqrt_psd(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_log_det_consistent(self, rng):
        th = sqrt_psd(_random_psd(rng))
        det = np.linalg.det(apply_spectral(SpectralFunction.THETA_OVER_SINH, th))
        assert float(sqrt_det_theta_over_sinh(th)) == pytest.approx(np.sqrt(det), rel=1e-10)
        assert float(log_det_theta_over_sinh(th)) == pytest.approx(np.log(det), rel=1e-10)

    def test_batched(self, rng):
        stack = np.stack([sqrt_psd(_random_psd(rng)) for _ in range(4)])
        out = apply_spectral(SpectralFunction.COSH, stack)
        for k in range(4):
            assert np.allclose(out[k], apply_spectral(SpectralFunction.COSH, stack[k]))

    def test_large_theta_log_det_finite(self):
        assert np.isfinite(float(log_det_theta_over_sinh(np.diag([900.0, 1e-6]))))


class TestIntertwining:
    def test_all_functions(self, rng):
        for _ in range(20):
            b = rng.normal(size=(2, 2))
            for f in SpectralFunction:
                assert intertwine_check(b, f, tau=0.5, t=float(rng.uniform(0, 1.5))) <= 1e-10

    def test_singular_b(self):
        b = np.array([[1.0, 2.0], [2.0, 4.0]])
        assert intertwine_check(b, SpectralFunction.TANH_OVER_THETA, tau=0.3) <= 1e-10
