from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exterior_algebra import (
    ExteriorOperator,
    clifford_quadratic,
    clifford_quadratic_batch,
    exp_batch,
    exp_operator,
    supertrace_batch,
)
from .matrix_functions import (
    SpectralFunction as SF,
    apply_spectral,
    eigh_psd,
    log_det_theta_over_sinh,
    log_theta_over_sinh,
    scalar_spectral,
    theta_pair,
)

CONSISTENCY_TOL = 1e-8


class KernelDomainError(ValueError):
    pass


class ChartError(ValueError):
    pass


class InternalConsistencyError(RuntimeError):
    pass


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise KernelDomainError(f"tau must be positive, got {tau}")
    return tau


@dataclass(frozen=True)
class KernelParams:
    tau: float
    t: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "tau", _check_tau(self.tau))
        if not self.t >= 0.0:
            raise KernelDomainError(f"deformation strength t must be >= 0, got {self.t}")
        object.__setattr__(self, "t", float(self.t))

    @property
    def s(self) -> float:
        return self.tau * self.t

    @classmethod
    def from_s(cls, tau: float, s: float) -> KernelParams:
        return cls(tau, s / _check_tau(tau))


@dataclass(frozen=True)
class FrameData:
    v: np.ndarray
    A: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.v, dtype=float).reshape(-1)
        a = np.array(self.A, dtype=float)
        if a.shape != (v.size, v.size):
            raise ValueError(f"A must be {v.size}x{v.size}, got {a.shape}")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(a))):
            raise ValueError("frame data must be finite")
        v.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "A", a)

    @property
    def n(self) -> int:
        return self.v.size

    @property
    def B(self) -> np.ndarray:
        return self.A.T

    def rotated(self, r: np.ndarray) -> FrameData:
        r = np.asarray(r, dtype=float)
        return FrameData(r @ self.v, r @ self.A @ r.T)


@dataclass(frozen=True)
class GaussianKernel:
    alpha: float
    n: int

    def __post_init__(self) -> None:
        if not self.alpha > 0.0:
            raise KernelDomainError(f"Gaussian width must be positive, got {self.alpha}")

    def log_value(self, rho: np.ndarray | float) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        return -0.5 * self.n * math.log(4.0 * math.pi * self.alpha) - rho * rho / (4.0 * self.alpha)

    def __call__(self, rho: np.ndarray | float) -> np.ndarray:
        return np.exp(self.log_value(rho))


def log_q(alpha: np.ndarray | float, rho2: np.ndarray | float, n: int) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    return -0.5 * n * np.log(4.0 * np.pi * alpha) - np.asarray(rho2, dtype=float) / (4.0 * alpha)


@dataclass(frozen=True)
class CutoffSpec:
    """Bump in ρ²: 1 for ρ <= r1, 0 for ρ >= r2.

    "quintic" is the C² smoothstep 10x³-15x⁴+6x⁵; "smooth" is the C^∞
    logistic transition expit(k(1/(1-x) - 1/x)) with k the sharpness.
    Larger k flattens the ends and steepens the middle.
    """

    r1: float
    r2: float
    profile: str = "quintic"
    sharpness: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.r1 < self.r2:
            raise ValueError(f"cutoff radii must satisfy 0 < r1 < r2, got {self.r1}, {self.r2}")
        if self.profile not in ("quintic", "smooth"):
            raise ValueError(f"unknown cutoff profile {self.profile!r}")
        if not self.sharpness > 0.0:
            raise ValueError(f"cutoff sharpness must be positive, got {self.sharpness}")

    @classmethod
    def from_injectivity(cls, inj: float, inner: float = 0.3, outer: float = 0.6,
                         profile: str = "quintic", sharpness: float = 1.0) -> CutoffSpec:
        return cls(inner * inj, outer * inj, profile, sharpness)

    def _step(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        inside = (x > 0.0) & (x < 1.0)
        xc = np.clip(x, 1e-12, 1.0 - 1e-12)
        if self.profile == "quintic":
            s = np.where(x >= 1.0, 1.0, np.where(inside, xc**3 * (10 - 15 * xc + 6 * xc**2), 0.0))
            s1 = np.where(inside, 30 * xc**2 * (1 - xc) ** 2, 0.0)
            s2 = np.where(inside, 60 * xc * (1 - xc) * (1 - 2 * xc), 0.0)
            return s, s1, s2
        k = self.sharpness
        z = k * (1.0 / (1.0 - xc) - 1.0 / xc)
        z1 = k * (1.0 / (1.0 - xc) ** 2 + 1.0 / xc**2)
        z2 = k * (2.0 / (1.0 - xc) ** 3 - 2.0 / xc**3)
        e = expit(z)
        w = e * expit(-z)
        s = np.where(x >= 1.0, 1.0, np.where(inside, e, 0.0))
        s1 = np.where(inside, w * z1, 0.0)
        s2 = np.where(inside, w * ((1 - 2 * e) * z1 * z1 + z2), 0.0)
        return s, s1, s2

    def radial(self, rho2: np.ndarray | float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """χ and its first two derivatives with respect to r = ρ²."""
        width = self.r2**2 - self.r1**2
        x = (np.asarray(rho2, dtype=float) - self.r1**2) / width
        s, s1, s2 = self._step(x)
        return 1.0 - s, -s1 / width, -s2 / width**2

    def __call__(self, rho: np.ndarray | float) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        return self.radial(rho * rho)[0]


def scalar_mehler(tau: float, y: np.ndarray | float, x: np.ndarray | float, b: float) -> np.ndarray:
    tau = _check_tau(tau)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    theta = 2.0 * b * tau
    ts = scalar_spectral(SF.THETA_OVER_SINH, theta)
    tc = scalar_spectral(SF.THETA_COTH, theta)
    log = (-0.5 * math.log(4.0 * math.pi * tau) + 0.5 * log_theta_over_sinh(theta)
           - (tc * (x * x + y * y) - 2.0 * ts * x * y) / (4.0 * tau))
    return np.exp(log)


def scalar_mehler_residual(tau: float, y: float, x: float, b: float, h: float) -> float:
    """|(∂_τ - ∂²_y + b²y²)ℳ| / ℳ by central differences with relative step h."""
    ht, hy = h * tau, h * math.sqrt(tau)
    m0 = float(scalar_mehler(tau, y, x, b))
    dt = (float(scalar_mehler(tau + ht, y, x, b)) - float(scalar_mehler(tau - ht, y, x, b))) / (2 * ht)
    dyy = (float(scalar_mehler(tau, y + hy, x, b)) - 2 * m0 + float(scalar_mehler(tau, y - hy, x, b))) / hy**2
    return abs(dt - dyy + b * b * y * y * m0) / m0


@dataclass(frozen=True, eq=False)
class MehlerPhi:
    """Φ(τ, ·, a, B) with everything independent of Y precomputed.

    a and B may carry a leading batch shape S; then Y is expected with shape
    S + (m, n) and results have shape S + (m,).
    """

    tau: float
    a: np.ndarray
    B: np.ndarray
    theta: np.ndarray = field(init=False, repr=False)
    theta_sharp: np.ndarray = field(init=False, repr=False)
    coth: np.ndarray = field(init=False, repr=False)
    lin: np.ndarray = field(init=False, repr=False)
    const: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        tau = _check_tau(self.tau)
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.B, dtype=float)
        n = a.shape[-1]
        if b.shape[-2:] != (n, n) or b.shape[:-2] != a.shape[:-1]:
            raise ValueError(f"incompatible shapes a={a.shape}, B={b.shape}")
        th, th_sharp = theta_pair(tau, b)
        k = apply_spectral(SF.COSH_M1_OVER_THETA_SINH, th)
        k_sharp = apply_spectral(SF.COSH_M1_OVER_THETA_SINH, th_sharp)
        lin = 2.0 * tau * np.einsum("...ij,...jk,...k->...i", k, b, a)
        const = (-0.5 * n * math.log(4.0 * math.pi * tau) + 0.5 * log_det_theta_over_sinh(th)
                 - 2.0 * tau * np.einsum("...i,...ij,...j->...", a, k_sharp, a))
        for name, val in (("tau", tau), ("a", a), ("B", b), ("theta", th), ("theta_sharp", th_sharp),
                          ("coth", apply_spectral(SF.THETA_COTH, th)), ("lin", lin), ("const", const)):
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.a.shape[-1]

    @property
    def batched(self) -> bool:
        return self.a.ndim > 1

    def log_value(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if not self.batched:
            quad = np.einsum("...i,ij,...j->...", y, self.coth, y)
            return self.const - quad / (4.0 * self.tau) - y @ self.lin
        quad = np.einsum("...mi,...ij,...mj->...m", y, self.coth, y)
        lin = np.einsum("...mi,...i->...m", y, self.lin)
        return self.const[..., None] - quad / (4.0 * self.tau) - lin

    def value(self, y: np.ndarray) -> np.ndarray:
        return np.exp(self.log_value(y))

    def grad_log(self, y: np.ndarray) -> np.ndarray:
        """∂_Y log Φ = -(1/2τ) Θcoth Θ Y - 2τ K B a."""
        y = np.asarray(y, dtype=float)
        if not self.batched:
            return -(y @ self.coth) / (2.0 * self.tau) - self.lin
        return (-np.einsum("...ij,...mj->...mi", self.coth, y) / (2.0 * self.tau)
                - self.lin[..., None, :])


def log_phi(tau: float, y: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return MehlerPhi(tau, a, b).log_value(y)


def phi(tau: float, y: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.exp(log_phi(tau, y, a, b))


def phi0_forms(tau: float, y: np.ndarray, x: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """log Φ₀ three ways: unrolled Φ(τ, Y-X, XB, B), closed form (i), closed form (ii)."""
    tau = _check_tau(tau)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    n = y.size
    direct = float(log_phi(tau, y - x, x @ b, b))
    th, _ = theta_pair(tau, b)
    pref = -0.5 * n * math.log(4.0 * math.pi * tau) + 0.5 * float(log_det_theta_over_sinh(th))
    c = apply_spectral(SF.THETA_COTH, th)
    s = apply_spectral(SF.THETA_OVER_SINH, th)
    form_i = pref - (y @ c @ y + x @ c @ x) / (4.0 * tau) + (y @ s @ x) / (2.0 * tau)
    cm = apply_spectral(SF.THETA_COSH_M1_OVER_SINH, th)
    cp = apply_spectral(SF.THETA_COSH_P1_OVER_SINH, th)
    form_ii = pref - ((y + x) @ cm @ (y + x) + (y - x) @ cp @ (y - x)) / (8.0 * tau)
    return direct, float(form_i), float(form_ii)


def phi0(tau: float, y: np.ndarray, x: np.ndarray, b: np.ndarray) -> float:
    direct, form_i, form_ii = phi0_forms(tau, y, x, b)
    scale = max(1.0, abs(form_i))
    if abs(form_i - form_ii) > CONSISTENCY_TOL * scale or abs(form_i - direct) > CONSISTENCY_TOL * scale:
        raise InternalConsistencyError(
            f"Phi0 closed forms disagree: direct={direct!r} (i)={form_i!r} (ii)={form_ii!r}")
    return math.exp(form_i)


def phi0_log_prefactor_batch(params: KernelParams, v: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Log of the scalar part of φ₀ for stacks v (..., n), A (..., n, n)."""
    tau, t = params.tau, params.t
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    n = v.shape[-1]
    gram = a @ np.swapaxes(a, -1, -2)
    w, vecs = eigh_psd(gram)
    theta = 2.0 * tau * t * np.sqrt(w)
    proj = np.einsum("...ik,...i->...k", vecs, v)
    k = scalar_spectral(SF.COSH_M1_OVER_THETA_SINH, theta)
    return (-0.5 * n * math.log(4.0 * math.pi * tau) + 0.5 * log_theta_over_sinh(theta).sum(axis=-1)
            - 2.0 * tau * t * t * np.sum(proj * proj * k, axis=-1))


def phi0_point(params: KernelParams, frame: FrameData) -> ExteriorOperator:
    pref = float(phi0_log_prefactor_batch(params, frame.v, frame.A))
    u = exp_operator(clifford_quadratic(params.s * frame.A))
    return u * math.exp(pref)


def phi0_supertrace_batch(params: KernelParams, v: np.ndarray, a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    n = a.shape[-1]
    pref = phi0_log_prefactor_batch(params, v, a)
    u = exp_batch(clifford_quadratic_batch(params.s * a))
    return np.exp(pref) * supertrace_batch(u, n)


def parametrix(params: KernelParams, frame: FrameData, y: np.ndarray, cutoff: CutoffSpec,
               chart_radius: float = math.inf) -> ExteriorOperator:
    y = np.asarray(y, dtype=float).reshape(-1)
    rho = float(np.linalg.norm(y))
    if rho >= chart_radius:
        raise ChartError(f"|Y| = {rho:.6g} outside the chart of radius {chart_radius:.6g}")
    if rho >= cutoff.r2:
        return ExteriorOperator.zero(frame.n, dtype=float)
    t = params.t
    scalar = float(phi(params.tau, y, t * frame.v, t * frame.B)) * float(cutoff(rho))
    return exp_operator(clifford_quadratic(params.s * frame.A)) * scalar


def operator_norm(op: ExteriorOperator) -> float:
    """|ψ| = √tr(ψψ*)."""
    m = np.asarray(op.matrix, dtype=float)
    return float(np.sqrt(np.sum(m * m)))


def gaussian_log_bounds(tau: float, y: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    tau = _check_tau(tau)
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    ev = MehlerPhi(tau, a, b)
    pref = -0.5 * y.size * math.log(4.0 * math.pi * tau) + 0.5 * float(log_det_theta_over_sinh(ev.theta))
    cp = apply_spectral(SF.THETA_COSH_P1_OVER_SINH, ev.theta)
    th_sharp = apply_spectral(SF.TANH_OVER_THETA, ev.theta_sharp)
    rhs_i = pref - float(y @ cp @ y) / (8.0 * tau)
    rhs_ii = pref - tau * float(a @ th_sharp @ a)
    return float(ev.log_value(y)), rhs_i, rhs_ii


def gaussian_bound_check(tau: float, y: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    lhs, rhs_i, rhs_ii = gaussian_log_bounds(tau, y, a, b)
    return math.exp(lhs), math.exp(rhs_i), math.exp(rhs_ii)


def mehler_residual(tau: float, y: np.ndarray, a: np.ndarray, b: np.ndarray, h: float) -> float:
    """|(∂_τ - Δ_Y + |a+YB|²)Φ| / Φ by central differences.

    h is relative: the τ step is hτ and the Y step is h√τ.
    """
    tau = _check_tau(tau)
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ht, hy = h * tau, h * math.sqrt(tau)
    f0 = float(phi(tau, y, a, b))
    dt = (float(phi(tau + ht, y, a, b)) - float(phi(tau - ht, y, a, b))) / (2.0 * ht)
    ev = MehlerPhi(tau, a, b)
    shifts = hy * np.eye(y.size)
    lap = float(np.sum(ev.value(y + shifts) + ev.value(y - shifts) - 2.0 * f0)) / hy**2
    pot = a + y @ b
    return abs(dt - lap + float(pot @ pot) * f0) / f0


def residual_order(tau: float, y: np.ndarray, a: np.ndarray, b: np.ndarray, h: float = 1e-2) -> float:
    return math.log2(mehler_residual(tau, y, a, b, h) / mehler_residual(tau, y, a, b, h / 2.0))


def delta_family_error(tau: float, a: np.ndarray, b: np.ndarray, f, points: int = 401) -> float:
    """|∫Φ(τ,Y,a,B) f(Y) dY - f(0)| by trapezoid quadrature, n ∈ {1, 2}."""
    tau = _check_tau(tau)
    a = np.asarray(a, dtype=float)
    n = a.size
    if n not in (1, 2):
        raise ValueError("delta-family quadrature supports n = 1 or 2")
    half = 12.0 * math.sqrt(tau) + 4.0 * tau * float(np.linalg.norm(a))
    axis = np.linspace(-half, half, points)
    h = axis[1] - axis[0]
    grid = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1)
    vals = phi(tau, grid, a, b) * f(grid)
    integral = float(vals.sum()) * h**n
    return abs(integral - float(f(np.zeros(n))))


@dataclass(frozen=True)
class EnvelopeFit:
    c0: float
    c1: float
    per_c1: dict[float, float]

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.c0)


def fit_gaussian_envelope(log_norm: np.ndarray, rho2: np.ndarray, tau: np.ndarray, vsq: np.ndarray,
                          n: int, c1_grid=(1.0, 1.5, 2.0, 4.0, 8.0),
                          extra_log: np.ndarray | float = 0.0) -> EnvelopeFit:
    """Smallest c0 with log_norm <= log c0 + log Q(c1τ, ρ) - τ|v|²/c1 + extra_log, per c1."""
    log_norm = np.asarray(log_norm, dtype=float)
    per: dict[float, float] = {}
    for c1 in c1_grid:
        env = log_q(c1 * np.asarray(tau), rho2, n) - np.asarray(tau) * np.asarray(vsq) / c1 + extra_log
        per[float(c1)] = float(np.exp(np.max(log_norm - env)))
    best = min(per, key=per.__getitem__)
    return EnvelopeFit(per[best], best, per)


def sample_parametrix_envelope(rng: np.random.Generator, n: int, samples: int, *,
                               tau_max: float = 0.5, s_max: float = 0.5,
                               cutoff: CutoffSpec | None = None) -> dict[str, np.ndarray]:
    """Random (τ, t, frame, Y) with τt <= s_max; returns log|H| and envelope inputs."""
    cutoff = cutoff or CutoffSpec.from_injectivity(math.pi)
    tau = rng.uniform(0.02, 1.0, samples) * tau_max
    t = rng.uniform(0.0, 1.0, samples) * s_max / tau
    v = rng.normal(size=(samples, n))
    a = rng.normal(size=(samples, n, n))
    direction = rng.normal(size=(samples, n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    y = direction * rng.uniform(0.0, cutoff.r2, (samples, 1))
    log_h = np.empty(samples)
    for i in range(samples):
        ev = MehlerPhi(tau[i], t[i] * v[i], t[i] * a[i].T)
        log_h[i] = float(ev.log_value(y[i]))
    rho2 = np.sum(y * y, axis=1)
    with np.errstate(divide="ignore"):
        log_chi = np.log(cutoff.radial(rho2)[0])
    u = exp_batch(clifford_quadratic_batch((tau * t)[:, None, None] * a))
    log_u = np.log(np.sqrt(np.sum(u * u, axis=(1, 2))))
    return {"log_norm": log_h + log_chi + log_u, "rho2": rho2, "tau": tau, "t": t,
            "vsq": t * t * np.sum(v * v, axis=1)}
