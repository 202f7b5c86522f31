from __future__ import annotations

from enum import Enum

import numpy as np

PSD_TOL = 1e-12
SYM_TOL = 1e-12
SERIES_THRESHOLD = 1e-3


class IndefiniteMatrixError(ValueError):
    pass


class SpectralFunction(str, Enum):
    """Even functions of θ applied to symmetric PSD matrices."""

    THETA_OVER_SINH = "theta/sinh"
    COSH = "cosh"
    COSH_M1_OVER_THETA_SINH = "(cosh-1)/(theta*sinh)"
    THETA_COTH = "theta*cosh/sinh"
    THETA_COSH_P1_OVER_SINH = "theta*(cosh+1)/sinh"
    THETA_COSH_M1_OVER_SINH = "theta*(cosh-1)/sinh"
    # matrix square root of θ/sinhθ; its determinant is √det(θ/sinhθ)
    SQRT_THETA_OVER_SINH = "sqrt(theta/sinh)"
    TANH_OVER_THETA = "tanh/theta"


# coefficients in x = θ², lowest order first
_SERIES: dict[SpectralFunction, tuple[float, ...]] = {
    SpectralFunction.THETA_OVER_SINH: (1.0, -1 / 6, 7 / 360, -31 / 15120, 127 / 604800),
    SpectralFunction.COSH: (1.0, 1 / 2, 1 / 24, 1 / 720, 1 / 40320),
    SpectralFunction.COSH_M1_OVER_THETA_SINH: (1 / 2, -1 / 24, 1 / 240, -17 / 20160, 31 / 362880),
    SpectralFunction.THETA_COTH: (1.0, 1 / 3, -1 / 45, 2 / 945, -1 / 4725),
    SpectralFunction.THETA_COSH_P1_OVER_SINH: (2.0, 1 / 6, -1 / 360, 1 / 15120, -1 / 604800),
    SpectralFunction.THETA_COSH_M1_OVER_SINH: (0.0, 1 / 2, -1 / 24, 1 / 240, -17 / 20160),
    SpectralFunction.SQRT_THETA_OVER_SINH: (1.0, -1 / 12, 1 / 160, -61 / 120960),
    SpectralFunction.TANH_OVER_THETA: (1.0, -1 / 3, 2 / 15, -17 / 315, 62 / 2835),
}


def _closed_form(f: SpectralFunction, th: np.ndarray) -> np.ndarray:
    # written with tanh/exp so large θ saturates instead of overflowing
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if f is SpectralFunction.THETA_OVER_SINH:
            return 2.0 * th * np.exp(-th) / -np.expm1(-2.0 * th)
        if f is SpectralFunction.COSH:
            return np.cosh(th)
        if f is SpectralFunction.COSH_M1_OVER_THETA_SINH:
            return np.tanh(th / 2.0) / th
        if f is SpectralFunction.THETA_COTH:
            return th / np.tanh(th)
        if f is SpectralFunction.THETA_COSH_P1_OVER_SINH:
            return th / np.tanh(th / 2.0)
        if f is SpectralFunction.THETA_COSH_M1_OVER_SINH:
            return th * np.tanh(th / 2.0)
        if f is SpectralFunction.SQRT_THETA_OVER_SINH:
            return np.sqrt(2.0 * th * np.exp(-th) / -np.expm1(-2.0 * th))
        if f is SpectralFunction.TANH_OVER_THETA:
            return np.tanh(th) / th
    raise ValueError(f"unknown spectral function {f!r}")


def scalar_spectral(f: SpectralFunction | str, theta: np.ndarray | float) -> np.ndarray:
    """Elementwise value of f; |θ| below SERIES_THRESHOLD uses the even series."""
    f = SpectralFunction(f)
    th = np.abs(np.asarray(theta, dtype=float))
    small = th < SERIES_THRESHOLD
    x = th * th
    series = np.polynomial.polynomial.polyval(x, _SERIES[f])
    big = _closed_form(f, np.where(small, 1.0, th))
    return np.where(small, series, big)


def log_theta_over_sinh(theta: np.ndarray | float) -> np.ndarray:
    th = np.abs(np.asarray(theta, dtype=float))
    small = th < SERIES_THRESHOLD
    safe = np.where(small, 1.0, th)
    big = np.log(safe) - safe + np.log(2.0) - np.log(-np.expm1(-2.0 * safe))
    x = th * th
    return np.where(small, -x / 6 + x * x / 180 - x**3 / 2835, big)


def check_symmetric(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != m.shape[-2]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    scale = np.maximum(1.0, np.abs(m).max(axis=(-2, -1)))
    asym = np.abs(m - np.swapaxes(m, -1, -2)).max(axis=(-2, -1))
    if np.any(asym > SYM_TOL * scale):
        raise ValueError(f"matrix is not symmetric (deviation {float(np.max(asym)):.3g})")
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def eigh_psd(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a (stack of) symmetric PSD matrices, tiny negatives clamped."""
    m = check_symmetric(m)
    w, v = np.linalg.eigh(m)
    scale = np.maximum(1.0, np.abs(w).max(axis=-1, keepdims=True))
    if np.any(w < -PSD_TOL * scale):
        raise IndefiniteMatrixError(f"matrix has eigenvalue {float(w.min()):.3g} below -{PSD_TOL}")
    return np.clip(w, 0.0, None), v


def _rebuild(v: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.einsum("...ik,...k,...jk->...ij", v, values, v)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = eigh_psd(m)
    return _rebuild(v, np.sqrt(w))


def apply_spectral(f: SpectralFunction | str, theta: np.ndarray) -> np.ndarray:
    w, v = eigh_psd(theta)
    return _rebuild(v, scalar_spectral(f, w))


def sqrt_det_theta_over_sinh(theta: np.ndarray) -> np.ndarray | float:
    w, _ = eigh_psd(theta)
    return np.exp(0.5 * log_theta_over_sinh(w).sum(axis=-1))


def log_det_theta_over_sinh(theta: np.ndarray) -> np.ndarray | float:
    w, _ = eigh_psd(theta)
    return log_theta_over_sinh(w).sum(axis=-1)


def theta_pair(tau: float, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Θ = √(4τ²BBᵀ) and Θ# = √(4τ²BᵀB)."""
    b = np.asarray(b, dtype=float)
    bt = np.swapaxes(b, -1, -2)
    return sqrt_psd(4.0 * tau * tau * (b @ bt)), sqrt_psd(4.0 * tau * tau * (bt @ b))


def intertwine_check(b: np.ndarray, f: SpectralFunction | str, tau: float, t: float = 1.0) -> float:
    """max|f(Θ)B - B f(Θ#)| for the scaled matrix tB."""
    bt = t * np.asarray(b, dtype=float)
    th, th_sharp = theta_pair(tau, bt)
    left = apply_spectral(f, th) @ bt
    right = bt @ apply_spectral(f, th_sharp)
    return float(np.abs(left - right).max())
