from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import root

from .manifolds import tangent_frame
from .mehler_kernel import ChartError

RTOL = 1e-11
ATOL = 1e-12
SHOOT_TOL = 1e-10
DISAGREEMENT_TOL = 1e-5
TRIANGLE_FRACTION = 0.3


class IntegrationError(RuntimeError):
    pass


class ShootingError(RuntimeError):
    pass


class MethodDisagreementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Surface:
    """Conformal chart metric e^{2f}(dx² + dy²).

    plane: f = 0; unit-sphere: stereographic f = log(2/(1+r²)), k = 1;
    bump: f = amplitude·exp(-r²/width²), curvature varies.
    """

    kind: str
    amplitude: float = 0.3
    width: float = 1.0
    chart_radius: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in ("plane", "unit-sphere", "bump"):
            raise ValueError(f"unknown surface {self.kind!r}")
        if self.width <= 0.0 or self.chart_radius <= 0.0:
            raise ValueError("surface width and chart radius must be positive")

    def conformal(self, x: np.ndarray | float, y: np.ndarray | float):
        """(f, f_x, f_y, Δf)."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r2 = x * x + y * y
        if self.kind == "plane":
            z = np.zeros_like(r2)
            return z, z, z, z
        if self.kind == "unit-sphere":
            f = np.log(2.0 / (1.0 + r2))
            return f, -2.0 * x / (1.0 + r2), -2.0 * y / (1.0 + r2), -4.0 / (1.0 + r2) ** 2
        w2 = self.width**2
        f = self.amplitude * np.exp(-r2 / w2)
        return f, -2.0 * x / w2 * f, -2.0 * y / w2 * f, f * (4.0 * r2 / w2**2 - 4.0 / w2)

    def curvature(self, x: np.ndarray | float, y: np.ndarray | float) -> np.ndarray:
        f, _, _, lap = self.conformal(x, y)
        return -np.exp(-2.0 * f) * lap

    @property
    def constant_curvature(self) -> float | None:
        return {"plane": 0.0, "unit-sphere": 1.0}.get(self.kind)

    @property
    def injectivity(self) -> float:
        return math.inf if self.kind == "plane" else math.pi

    @property
    def triangle_bound(self) -> float:
        return TRIANGLE_FRACTION * self.injectivity

    def embed(self, x: np.ndarray | float, y: np.ndarray | float) -> np.ndarray:
        """Inverse stereographic projection to the unit sphere."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r2 = x * x + y * y
        return np.stack([2.0 * x, 2.0 * y, r2 - 1.0], axis=-1) / (1.0 + r2)[..., None]

    def distance(self, p: tuple[float, float], q: tuple[float, float]) -> float:
        if self.kind == "plane":
            return math.hypot(q[0] - p[0], q[1] - p[1])
        if self.kind == "unit-sphere":
            a, b = self.embed(*p), self.embed(*q)
            return math.atan2(float(np.linalg.norm(np.cross(a, b))), float(a @ b))
        if p == q:
            return 0.0
        return geodesic_bvp(self, p, q)[1]


SURFACES = ("plane", "unit-sphere", "bump")


@dataclass(frozen=True)
class UnitTangent:
    """Base point in chart coordinates and direction angle in the orthonormal
    frame e^{-f}∂x, e^{-f}∂y; the angle is kept in (-π, π]."""

    x: float
    y: float
    phi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "phi", math.remainder(float(self.phi), 2.0 * math.pi))

    @property
    def point(self) -> tuple[float, float]:
        return (self.x, self.y)

    def chart_vector(self, surface: Surface) -> np.ndarray:
        f = float(surface.conformal(self.x, self.y)[0])
        return math.exp(-f) * np.array([math.cos(self.phi), math.sin(self.phi)])

    def metric_norm(self, surface: Surface) -> float:
        f = float(surface.conformal(self.x, self.y)[0])
        return math.exp(f) * float(np.linalg.norm(self.chart_vector(surface)))


def _rhs(surface: Surface, jacobi: bool) -> Callable[[float, np.ndarray], list[float]]:
    def rhs(_s: float, z: np.ndarray) -> list[float]:
        x, y, phi = z[0], z[1], z[2]
        f, fx, fy, lap = (float(v) for v in surface.conformal(x, y))
        e = math.exp(-f)
        c, s = math.cos(phi), math.sin(phi)
        out = [e * c, e * s, e * (fy * c - fx * s)]
        if jacobi:
            k = -math.exp(-2.0 * f) * lap
            out += [-k * z[5], -k * z[6], z[3], z[4]]
        return out
    return rhs


def _integrate(surface: Surface, z0: list[float], length: float, jacobi: bool = False) -> np.ndarray:
    radius2 = surface.chart_radius**2

    def leave(_s: float, z: np.ndarray) -> float:
        return radius2 - z[0] ** 2 - z[1] ** 2

    leave.terminal = True
    sol = solve_ivp(_rhs(surface, jacobi), (0.0, length), z0, method="DOP853", rtol=RTOL, atol=ATOL,
                    events=leave)
    if sol.status == 1:
        raise ChartError(f"geodesic left the chart of radius {surface.chart_radius}")
    if not sol.success:
        raise IntegrationError(sol.message)
    return sol.y[:, -1]


def geodesic_flow(surface: Surface, u: UnitTangent, t: float) -> UnitTangent:
    """ξ^t; negative t runs backwards."""
    if t == 0.0:
        return u
    z = _integrate(surface, [u.x, u.y, u.phi], float(t))
    return UnitTangent(float(z[0]), float(z[1]), float(z[2]))


def rotation_flow(u: UnitTangent, s: float) -> UnitTangent:
    """η^s: rotate the direction by s, base point fixed."""
    return UnitTangent(u.x, u.y, u.phi + s)


def constant_curvature_propagator(k: float, t: float) -> np.ndarray:
    if k == 0.0:
        return np.array([[1.0, 0.0], [t, 1.0]])
    if k > 0.0:
        r = math.sqrt(k)
        c, s = math.cos(r * t), math.sin(r * t)
        return np.array([[c, -r * s], [s / r, c]])
    r = math.sqrt(-k)
    c, s = math.cosh(r * t), math.sinh(r * t)
    return np.array([[c, r * s], [s / r, c]])


def jacobi_propagator(surface: Surface, u: UnitTangent, t: float, *, closed_form: bool = True) -> np.ndarray:
    """H(t, u): X' = [[0, -k], [1, 0]]X, X(0) = I, along p(s) = P(ξ^{-s}u)."""
    if t < 0.0:
        raise ValueError(f"propagator length must be >= 0, got {t}")
    k = surface.constant_curvature
    if closed_form and k is not None:
        return constant_curvature_propagator(k, t)
    if t == 0.0:
        return np.eye(2)
    z = _integrate(surface, [u.x, u.y, u.phi + math.pi, 1.0, 0.0, 0.0, 1.0], float(t), jacobi=True)
    return z[3:].reshape(2, 2)


def jacobi_closed_form_gap(surface: Surface, u: UnitTangent, t: float) -> float:
    """Largest entry of |H_numeric - H_closed| on a constant-curvature surface."""
    if surface.constant_curvature is None:
        raise ValueError(f"{surface.kind} has no closed-form propagator")
    num = jacobi_propagator(surface, u, t, closed_form=False)
    return float(np.abs(num - jacobi_propagator(surface, u, t, closed_form=True)).max())


def geodesic_bvp(surface: Surface, p: tuple[float, float], q: tuple[float, float],
                 guess: tuple[float, float] | None = None) -> tuple[float, float, float]:
    """Shoot from p to q: (initial angle ψ, length L, arrival angle)."""
    p = (float(p[0]), float(p[1]))
    q = (float(q[0]), float(q[1]))
    if guess is None:
        mid = 0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])
        f = float(surface.conformal(*mid)[0])
        guess = (math.atan2(q[1] - p[1], q[0] - p[0]), math.exp(f) * math.hypot(q[0] - p[0], q[1] - p[1]))
    if guess[1] <= 0.0:
        raise ShootingError("endpoints coincide")

    def miss(z: np.ndarray) -> np.ndarray:
        end = _integrate(surface, [p[0], p[1], float(z[0])], float(z[1]))
        return np.array([end[0] - q[0], end[1] - q[1]])

    sol = root(miss, np.array(guess, dtype=float), method="hybr", tol=1e-13)
    if not sol.success or float(np.abs(miss(sol.x)).max()) > SHOOT_TOL or sol.x[1] <= 0.0:
        raise ShootingError(f"shooting from {p} to {q} did not converge: {sol.message}")
    psi, length = float(sol.x[0]), float(sol.x[1])
    end = _integrate(surface, [p[0], p[1], psi], length)
    return math.remainder(psi, 2.0 * math.pi), length, math.remainder(float(end[2]), 2.0 * math.pi)


@dataclass(frozen=True)
class TriangleSpec:
    t: float
    theta: float
    l: float
    u: UnitTangent

    def __post_init__(self) -> None:
        if not (self.t > 0.0 and self.l > 0.0):
            raise ValueError(f"sides must be positive, got t={self.t}, l={self.l}")
        if not 0.0 < self.theta <= math.pi:
            raise ValueError(f"angle must lie in (0, π], got {self.theta}")

    def replace(self, **kw: Any) -> TriangleSpec:
        data = {"t": self.t, "theta": self.theta, "l": self.l, "u": self.u}
        data.update(kw)
        return TriangleSpec(**data)


@dataclass(frozen=True)
class TriangleSolution:
    b: float
    alpha: float
    gamma: float
    u_A: UnitTangent
    u_C: UnitTangent
    shooting: tuple[float, float, float] | None = None
    disagreement: float = 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"b": self.b, "alpha": self.alpha, "gamma": self.gamma, "disagreement": self.disagreement}


def _primary(surface: Surface, t: float, theta: float, l: float, u: UnitTangent
             ) -> tuple[float, float, float, UnitTangent, UnitTangent]:
    w = geodesic_flow(surface, u, -t)

    def rhs(_l: float, z: np.ndarray) -> list[float]:
        b, gamma, alpha = z
        h = jacobi_propagator(surface, rotation_flow(w, alpha - math.pi), b)
        return [math.cos(gamma), -(h[0, 0] / h[1, 0]) * math.sin(gamma), math.sin(gamma) / h[1, 0]]

    sol = solve_ivp(rhs, (0.0, l), [t, math.pi - theta, 0.0], method="DOP853", rtol=RTOL, atol=ATOL)
    if not sol.success:
        raise IntegrationError(sol.message)
    b, gamma, alpha = (float(v) for v in sol.y[:, -1])
    u_c = geodesic_flow(surface, rotation_flow(u, math.pi - theta), l)
    return b, alpha, gamma, rotation_flow(w, alpha - math.pi), u_c


def solve_sas(surface: Surface, spec: TriangleSpec, *, verify: bool = True) -> TriangleSolution:
    """Remaining side b and angles α (at A), γ (at C) from (t, θ, l, u).

    The ODE in l is the primary method; with verify the triangle is also
    closed by shooting from A to C and both must agree.
    """
    bound = surface.triangle_bound
    if spec.t > bound or spec.l > bound:
        raise ValueError(f"sides must not exceed {bound:.4g} on {surface.kind}")
    b, alpha, gamma, u_a, u_c = _primary(surface, spec.t, spec.theta, spec.l, spec.u)
    if not verify:
        return TriangleSolution(b, alpha, gamma, u_a, u_c)
    w = rotation_flow(u_a, math.pi - alpha)
    psi, length, arrive = geodesic_bvp(surface, w.point, u_c.point)
    shot = (length, math.remainder(psi - w.phi, 2.0 * math.pi), math.remainder(u_c.phi - arrive, 2.0 * math.pi))
    gap = max(abs(b - shot[0]), abs(alpha - shot[1]), abs(gamma - shot[2]))
    if gap > DISAGREEMENT_TOL:
        raise MethodDisagreementError(
            f"ODE (b, α, γ) = {(b, alpha, gamma)} vs shooting {shot}: gap {gap:.3g}")
    return TriangleSolution(b, alpha, gamma, u_a, u_c, shot, gap)


# ---------- identities ----------

def turn(x: float) -> np.ndarray:
    c, s = math.cos(x), math.sin(x)
    return np.array([[-c, -s, 0.0], [s, -c, 0.0], [0.0, 0.0, 1.0]])


def side(h: np.ndarray) -> np.ndarray:
    out = np.eye(3)
    out[1:, 1:] = h
    return out


_E1 = np.array([1.0, 0.0, 0.0])
_E3 = np.array([0.0, 0.0, 1.0])


def _lhs_row(d_alpha: float, d_b: float, d_gamma: float, alpha: float, ab: np.ndarray, ca: np.ndarray) -> np.ndarray:
    ra = turn(alpha)
    return d_alpha * (_E3 @ ab) - d_b * (_E1 @ ra @ ab) + d_gamma * (_E3 @ ca @ ra @ ab)


def _sides(surface: Surface, spec: TriangleSpec, sol: TriangleSolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ab = side(jacobi_propagator(surface, spec.u, spec.t, closed_form=False))
    bc = side(jacobi_propagator(surface, sol.u_C, spec.l, closed_form=False))
    ca = side(jacobi_propagator(surface, sol.u_A, sol.b, closed_form=False))
    return ab, bc, ca


def plane_sas_derivatives(t: float, theta: float, l: float) -> np.ndarray:
    """Rows ∂_t, ∂_θ, ∂_l of (α, b, γ) for the Euclidean triangle."""
    b2 = t * t + l * l - 2.0 * t * l * math.cos(theta)
    b = math.sqrt(b2)
    s = math.sin(theta)
    return np.array([
        [-l * s / b2, (t - l * math.cos(theta)) / b, l * s / b2],
        [l * (t * math.cos(theta) - l) / b2, t * l * s / b, t * (l * math.cos(theta) - t) / b2],
        [t * s / b2, (l - t * math.cos(theta)) / b, -t * s / b2],
    ])


def _values(surface: Surface, t: float, theta: float, l: float, u: UnitTangent) -> np.ndarray:
    b, alpha, gamma, _, _ = _primary(surface, t, theta, l, u)
    return np.array([alpha, b, gamma])


def parameter_derivatives(surface: Surface, spec: TriangleSpec, h: float = 1e-4) -> np.ndarray:
    rows = []
    for dt, dth, dl in ((h, 0, 0), (0, h, 0), (0, 0, h)):
        hi = _values(surface, spec.t + dt, spec.theta + dth, spec.l + dl, spec.u)
        lo = _values(surface, spec.t - dt, spec.theta - dth, spec.l - dl, spec.u)
        rows.append((hi - lo) / (2.0 * h))
    return np.array(rows)


def _moves(surface: Surface) -> tuple[Callable[[UnitTangent, float], UnitTangent], ...]:
    def x1(u: UnitTangent, h: float) -> UnitTangent:
        return geodesic_flow(surface, u, h)

    def x2(u: UnitTangent, h: float) -> UnitTangent:
        return rotation_flow(geodesic_flow(surface, rotation_flow(u, math.pi / 2), h), -math.pi / 2)

    def x3(u: UnitTangent, h: float) -> UnitTangent:
        return rotation_flow(u, h)

    return x1, x2, x3


def frame_derivatives(surface: Surface, spec: TriangleSpec, h: float = 1e-4) -> np.ndarray:
    """Rows X₁, X₂, X₃ applied to (α, b, γ) by moving u along the three flows."""
    rows = []
    for move in _moves(surface):
        hi = _values(surface, spec.t, spec.theta, spec.l, move(spec.u, h))
        lo = _values(surface, spec.t, spec.theta, spec.l, move(spec.u, -h))
        rows.append((hi - lo) / (2.0 * h))
    return np.array(rows)


def sas_identity_check(surface: Surface, spec: TriangleSpec, which: str, *, h: float = 1e-4,
                       closed_form: bool = False) -> float:
    """Max entry-wise residual of the SAS identity (i) or (ii)."""
    if which not in ("i", "ii"):
        raise ValueError(f"identity must be 'i' or 'ii', got {which!r}")
    sol = solve_sas(surface, spec, verify=False)
    ab, bc, ca = _sides(surface, spec, sol)
    ra, rg = turn(sol.alpha), turn(sol.gamma)
    if which == "i":
        derivs = frame_derivatives(surface, spec, h)
        total = turn(spec.theta) @ bc @ rg @ ca @ ra @ ab - np.eye(3)
        rhs = list(total)
    else:
        if closed_form and surface.kind == "plane":
            derivs = plane_sas_derivatives(spec.t, spec.theta, spec.l)
        else:
            derivs = parameter_derivatives(surface, spec, h)
        rhs = [_E1, -(_E3 @ bc @ rg @ ca @ ra @ ab), _E1 @ rg @ ca @ ra @ ab]
    lhs = [_lhs_row(d[0], d[1], d[2], sol.alpha, ab, ca) for d in derivs]
    return float(max(np.abs(a - b).max() for a, b in zip(lhs, rhs)))


@dataclass(frozen=True)
class SecondDerivative:
    value: float
    finite_difference: float
    flag: bool


def second_derivative_check(surface: Surface, spec: TriangleSpec, h: float = 1e-3) -> SecondDerivative:
    """(b²)_ll = 2cos²γ + 2b(H₁₁/H₂₁)sin²γ with H = H(b, u_A); flag is (b²)_ll >= 1."""
    sol = solve_sas(surface, spec, verify=False)
    hb = jacobi_propagator(surface, sol.u_A, sol.b, closed_form=False)
    value = 2.0 * math.cos(sol.gamma) ** 2 + 2.0 * sol.b * (hb[0, 0] / hb[1, 0]) * math.sin(sol.gamma) ** 2
    b_hi = _values(surface, spec.t, spec.theta, spec.l + h, spec.u)[1]
    b_lo = _values(surface, spec.t, spec.theta, spec.l - h, spec.u)[1]
    fd = (b_hi**2 - 2.0 * sol.b**2 + b_lo**2) / h**2
    return SecondDerivative(value, fd, value >= 1.0)


def side_derivative_gap(surface: Surface, spec: TriangleSpec, h: float = 1e-4) -> float:
    """|Δb/Δl - cos γ| by central differences."""
    sol = solve_sas(surface, spec, verify=False)
    b_hi = _values(surface, spec.t, spec.theta, spec.l + h, spec.u)[1]
    b_lo = _values(surface, spec.t, spec.theta, spec.l - h, spec.u)[1]
    return abs((b_hi - b_lo) / (2.0 * h) - math.cos(sol.gamma))


# ---------- comparison inequality ----------

@dataclass(frozen=True)
class ComparisonResult:
    lhs: float
    rhs: float
    flag: bool
    ratio: float


def comparison_check(surface: Surface, a: tuple[float, float], b: tuple[float, float],
                     z: tuple[float, float], lam: float) -> ComparisonResult:
    """μρ(z,A)² + λρ(z,B)² - λμρ(A,B)² against ¼ρ(o,z)², o on AB with ρ(A,o) = λρ(A,B)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    mu = 1.0 - lam
    d_ab = surface.distance(a, b)
    if d_ab == 0.0 or lam == 0.0:
        o = a
    else:
        psi, length, _ = geodesic_bvp(surface, a, b)
        o = geodesic_flow(surface, UnitTangent(a[0], a[1], psi), lam * length).point
    d_oz = surface.distance(o, z)
    lhs = mu * surface.distance(z, a) ** 2 + lam * surface.distance(z, b) ** 2 - lam * mu * d_ab**2
    rhs = 0.25 * d_oz**2
    ratio = lhs / d_oz**2 if d_oz > 0.0 else math.inf
    return ComparisonResult(lhs, rhs, lhs >= rhs - 1e-12, ratio)


@dataclass(frozen=True)
class ComparisonSweep:
    samples: int
    violations: int
    infimum: float

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict[str, Any]:
        return {"samples": self.samples, "violations": self.violations, "infimum_ratio": self.infimum}


def _sphere_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.arctan2(np.linalg.norm(np.cross(p, q), axis=-1), np.sum(p * q, axis=-1))


def comparison_sweep(kind: str, rng: np.random.Generator, samples: int, eps: float) -> ComparisonSweep:
    """Vectorised comparison inequality on small random configurations."""
    lam = rng.uniform(0.0, 1.0, samples)[:, None]
    if kind == "plane":
        centre = rng.normal(size=(samples, 2))
        pts = [centre + 0.5 * eps * _disk(rng, samples) for _ in range(3)]
        a, b, z = pts
        o = (1.0 - lam) * a + lam * b

        def dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
            return np.linalg.norm(p - q, axis=-1)
    elif kind == "unit-sphere":
        centre = rng.normal(size=(samples, 3))
        centre /= np.linalg.norm(centre, axis=-1, keepdims=True)
        e1, e2 = tangent_frame(centre)
        pts = []
        for _ in range(3):
            off = 0.5 * eps * _disk(rng, samples)
            r = np.linalg.norm(off, axis=-1, keepdims=True)
            direction = (off[:, :1] * e1 + off[:, 1:] * e2) / np.where(r > 0.0, r, 1.0)
            pts.append(np.cos(r) * centre + np.sin(r) * direction)
        a, b, z = pts
        omega = _sphere_dist(a, b)[:, None]
        safe = np.where(omega > 1e-12, omega, 1.0)
        o = np.where(omega > 1e-12, (np.sin((1.0 - lam) * omega) * a + np.sin(lam * omega) * b) / np.sin(safe), a)
        dist = _sphere_dist
    else:
        raise ValueError(f"comparison sweep supports plane and unit-sphere, got {kind!r}")
    lam = lam[:, 0]
    lhs = (1.0 - lam) * dist(z, a) ** 2 + lam * dist(z, b) ** 2 - lam * (1.0 - lam) * dist(a, b) ** 2
    d_oz = dist(o, z)
    violations = int(np.sum(lhs < 0.25 * d_oz**2 - 1e-12))
    keep = d_oz > 1e-9
    infimum = float(np.min(lhs[keep] / d_oz[keep] ** 2)) if np.any(keep) else math.nan
    return ComparisonSweep(samples, violations, infimum)


def _disk(rng: np.random.Generator, samples: int) -> np.ndarray:
    ang = rng.uniform(0.0, 2.0 * math.pi, samples)
    rad = np.sqrt(rng.uniform(0.0, 1.0, samples))
    return np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
