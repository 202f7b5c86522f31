from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np
import scipy.sparse as sp

from .exterior_algebra import (
    _creation_matrix,
    basis,
    clifford_quadratic_batch,
    exp_batch,
    grading,
    supertrace_batch,
    weitzenbock_term,
)
from .manifolds import DegenerateZeroError, ModelManifold, VectorFieldSpec, ZeroPoint, frame_batch
from .matrix_functions import SpectralFunction as SF, scalar_spectral
from .mehler_kernel import FrameData, KernelParams, phi0_supertrace_batch

DIMENSION_CAP = 5000
RICHARDSON_TOL = 0.1

# |V(p)| >= FIELD_LOWER_BOUND marks p as away from the zeros
FIELD_LOWER_BOUND = 0.25
# (coshθ - 1)/(θ sinhθ) must stay above this on the sampled s range
SPECTRAL_LOWER_BOUND = 0.05

S_VALUES = (0.5, 0.25, 0.1)
KAPPA_VALUES = (0.4, 0.2, 0.08, 0.04)


class DimensionCapError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


def _shift(n_grid: int, axis: int, dim: int) -> sp.csr_matrix:
    """(S f)(g) = f(g + e_axis) on the periodic grid, row-major flattening."""
    s1 = sp.csr_matrix(np.roll(np.eye(n_grid), 1, axis=1))
    left = sp.identity(n_grid**axis, format="csr")
    right = sp.identity(n_grid ** (dim - 1 - axis), format="csr")
    return sp.kron(sp.kron(left, s1), right, format="csr")


@dataclass(frozen=True, eq=False)
class DiscreteComplex:
    """Tensor-product cochain complex on the periodic N^n grid.

    State index = grid_index * 2^n + form_index. A form ω_J at grid point g
    lives at x_g + (h/2)·1_J, so d is a forward difference and δ = dᵀ.
    """

    N: int
    n: int

    def __post_init__(self) -> None:
        if self.n not in (1, 2):
            raise ValueError(f"discrete complex supports n = 1 or 2, got {self.n}")
        if self.N < 2:
            raise ValueError(f"grid size must be >= 2, got {self.N}")

    @property
    def h(self) -> float:
        return 2.0 * math.pi / self.N

    @property
    def weight(self) -> float:
        return self.h**self.n

    @property
    def forms(self) -> int:
        return 2**self.n

    @property
    def points_count(self) -> int:
        return self.N**self.n

    @property
    def dim(self) -> int:
        return self.points_count * self.forms

    @cached_property
    def points(self) -> np.ndarray:
        axis = self.h * np.arange(self.N)
        return np.stack(np.meshgrid(*([axis] * self.n), indexing="ij"), axis=-1).reshape(-1, self.n)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Staggering 1_J per basis form, shape (2^n, n)."""
        out = np.zeros((self.forms, self.n))
        for k, form in enumerate(basis(self.n)):
            for j in form.index_set:
                out[k, j - 1] = 1.0
        return out

    def cell_locations(self) -> np.ndarray:
        """Location of every state component, shape (dim, n)."""
        loc = self.points[:, None, :] + 0.5 * self.h * self.offsets[None, :, :]
        return loc.reshape(-1, self.n)

    @cached_property
    def shifts(self) -> tuple[sp.csr_matrix, ...]:
        return tuple(_shift(self.N, j, self.n) for j in range(self.n))

    @cached_property
    def d(self) -> sp.csr_matrix:
        eye = sp.identity(self.points_count, format="csr")
        out = sp.csr_matrix((self.dim, self.dim))
        for j, shift in enumerate(self.shifts):
            out = out + sp.kron((shift - eye) / self.h, _creation_matrix(self.n, j + 1), format="csr")
        return out

    @property
    def delta(self) -> sp.csr_matrix:
        return self.d.T.tocsr()

    def degree_of_state(self) -> np.ndarray:
        deg = np.array([b.degree for b in basis(self.n)])
        return np.tile(deg, self.points_count)

    def euler_characteristic(self) -> int:
        """Alternating sum of cochain ranks."""
        return int(sum((-1) ** k * math.comb(self.n, k) for k in range(self.n + 1)) * self.points_count)

    def multiplication(self, field_: VectorFieldSpec) -> sp.csr_matrix:
        """Σ_j v_j ω_j∧ with v_j sampled at the target cell and the source averaged."""
        eye = sp.identity(self.points_count, format="csr")
        vals = field_.values(self.cell_locations())
        out = sp.csr_matrix((self.dim, self.dim))
        for j, shift in enumerate(self.shifts):
            avg = sp.kron((eye + shift) / 2.0, _creation_matrix(self.n, j + 1), format="csr")
            out = out + sp.diags(vals[:, j]) @ avg
        return out.tocsr()

    def dirac(self, field_: VectorFieldSpec, t: float) -> sp.csr_matrix:
        """D_t = d + δ + t(V*∧ + i(V)); odd and symmetric."""
        m = self.multiplication(field_)
        return (self.d + self.delta + t * (m + m.T)).tocsr()


def check_dimension(dim: int) -> None:
    if dim > DIMENSION_CAP:
        raise DimensionCapError(f"operator dimension {dim} exceeds the cap of {DIMENSION_CAP}")


def discrete_complex(manifold: ModelManifold) -> DiscreteComplex:
    if manifold.kind != "torus":
        raise ValueError("the discrete de Rham complex is only built on tori")
    if len(set(manifold.grid)) != 1:
        raise ValueError(f"torus grid must be uniform, got {manifold.grid}")
    cx = DiscreteComplex(manifold.grid[0], manifold.dim)
    check_dimension(cx.dim)
    return cx


def curvature_term(manifold: ModelManifold) -> np.ndarray:
    """Weitzenböck curvature operator; the flat torus tensor makes it zero."""
    n = manifold.dim
    return weitzenbock_term(n, np.zeros((n,) * 4)).matrix


def assemble_box_t(manifold: ModelManifold, field_: VectorFieldSpec, t: float) -> np.ndarray:
    """□_t = D_t² (plus the curvature term) as a dense symmetric matrix."""
    cx = discrete_complex(manifold)
    dt = cx.dirac(field_, float(t))
    box = (dt @ dt).toarray()
    box += np.kron(np.eye(cx.points_count), curvature_term(manifold))
    return 0.5 * (box + box.T)


def heat_kernel_exact(box: np.ndarray, tau: float) -> np.ndarray:
    """e^{-τ□} by symmetric eigendecomposition."""
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    box = np.asarray(box, dtype=float)
    check_dimension(box.shape[0])
    w, v = np.linalg.eigh(box)
    return (v * np.exp(-tau * w)) @ v.T


def kernel_block(kernel: np.ndarray, cx: DiscreteComplex, q: int, p: int) -> np.ndarray:
    """G(τ, q, p): the 2^n block divided by the quadrature weight."""
    f = cx.forms
    return kernel[q * f:(q + 1) * f, p * f:(p + 1) * f] / cx.weight


def discrete_supertrace(kernel: np.ndarray, cx: DiscreteComplex) -> float:
    """Σ_p str G(τ, p, p)·w_p."""
    signs = np.tile(grading(cx.n), cx.points_count)
    return float(np.dot(np.diagonal(kernel), signs))


def null_space_dimension(box: np.ndarray, tol: float = 1e-8) -> int:
    w = np.linalg.eigvalsh(box)
    return int(np.sum(np.abs(w) < tol * max(1.0, float(np.abs(w).max()))))


# ---------- semiclassical supertrace ----------

@dataclass(frozen=True, eq=False)
class QuadratureFrames:
    points: np.ndarray
    weights: np.ndarray
    v: np.ndarray
    A: np.ndarray


def quadrature_frames(manifold: ModelManifold, field_: VectorFieldSpec) -> QuadratureFrames:
    pts, w = manifold.quadrature()
    v, a = frame_batch(manifold, field_, pts)
    return QuadratureFrames(pts, w, v, a)


def _integral(params: KernelParams, frames: QuadratureFrames) -> float:
    vals = phi0_supertrace_batch(params, frames.v, frames.A)
    return float(np.dot(vals, frames.weights))


def supertrace_integral(manifold: ModelManifold, field_: VectorFieldSpec, params: KernelParams, *,
                        frames: tuple[QuadratureFrames, QuadratureFrames] | None = None,
                        check: bool = True) -> float:
    """∫_M str φ₀(τ, t, p) dp, checked against the doubled quadrature."""
    if frames is None:
        frames = (quadrature_frames(manifold, field_),
                  quadrature_frames(manifold.refined(), field_) if check else None)
    coarse = _integral(params, frames[0])
    if not check:
        return coarse
    fine = _integral(params, frames[1])
    if abs(fine - coarse) > RICHARDSON_TOL * max(abs(fine), 1.0):
        raise QuadratureError(
            f"quadrature under-resolved at tau={params.tau:.4g}, s={params.s:.4g}: "
            f"{coarse:.6g} vs {fine:.6g} on the doubled grid")
    return fine


def localized_index_factor(frame: FrameData, s: float) -> float:
    """str exp(sΣA_jk E⁺_jE⁻_k) / Π 2sinh(sσ_i), σ the singular values of A."""
    if not s > 0.0:
        raise ValueError(f"s must be positive, got {s}")
    sigma = np.linalg.svd(frame.A, compute_uv=False)
    if np.any(sigma == 0.0) or abs(float(np.linalg.det(frame.A))) == 0.0:
        raise DegenerateZeroError("localized index factor needs det A != 0")
    u = exp_batch(clifford_quadratic_batch(s * frame.A))
    num = float(supertrace_batch(u, frame.n))
    return num / float(np.prod(2.0 * np.sinh(s * sigma)))


def index_limit_sum(zeros: Sequence[ZeroPoint], s: float) -> float:
    return float(sum(localized_index_factor(FrameData(np.zeros(len(z.A)), z.A), s) for z in zeros))


def _polynomial_limit(x: Sequence[float], y: Sequence[float]) -> float:
    """Value at 0 of the interpolating polynomial through (x, y)."""
    coef = np.polynomial.polynomial.polyfit(np.asarray(x), np.asarray(y), len(x) - 1)
    return float(coef[0])


@dataclass
class SemiclassicalReport:
    rows: list[dict[str, float]] = field(default_factory=list)
    per_s: dict[float, float] = field(default_factory=dict)
    cauchy: dict[float, bool] = field(default_factory=dict)
    chi: float = math.nan

    def to_dict(self) -> dict[str, Any]:
        return {
            "rows": self.rows,
            "per_s": [{"s": s, "tau_limit": v, "cauchy": self.cauchy[s]} for s, v in self.per_s.items()],
            "chi": self.chi,
        }


def semiclassical_chi(manifold: ModelManifold, field_: VectorFieldSpec, *,
                      s_values: Sequence[float] = S_VALUES,
                      kappas: Sequence[float] = KAPPA_VALUES,
                      taus: Sequence[float] | None = None,
                      check: bool = True) -> SemiclassicalReport:
    """s-lim protocol: τ → 0 at fixed s = τt, then s → 0.

    τ runs over κ·s² (the localisation width around the zeros then depends on
    κ only); an explicit taus list overrides that and is used for every s.
    """
    frames = (quadrature_frames(manifold, field_),
              quadrature_frames(manifold.refined(), field_) if check else None)
    report = SemiclassicalReport()
    for s in s_values:
        tau_list = list(taus) if taus is not None else [k * s * s for k in kappas]
        values = []
        for tau in tau_list:
            params = KernelParams.from_s(tau, s)
            val = supertrace_integral(manifold, field_, params, frames=frames, check=check)
            values.append(val)
            report.rows.append({"s": float(s), "tau": float(tau), "t": params.t, "value": val})
        diffs = np.abs(np.diff(values))
        report.cauchy[float(s)] = bool(np.all(np.diff(diffs) <= 0.0))
        tail = min(3, len(tau_list))
        report.per_s[float(s)] = _polynomial_limit(tau_list[-tail:], values[-tail:])
    ss = list(report.per_s)
    report.chi = _polynomial_limit(ss, [report.per_s[s] for s in ss])
    return report


@dataclass(frozen=True)
class DecayReport:
    ts: tuple[float, ...]
    scaled_max: tuple[float, ...]
    bound: tuple[float, ...]
    rate: float
    within_bound: bool
    decays: bool


def away_from_zero_decay(manifold: ModelManifold, field_: VectorFieldSpec, s: float,
                         ts: Sequence[float] = (2.0, 4.0, 8.0, 16.0)) -> DecayReport:
    """τ^{n/2}|str φ₀| at points with |V| >= FIELD_LOWER_BOUND along τ = s/t.

    The envelope 2^n exp(s‖Q(A)‖)·exp(-2 s t δ_spec δ²) bounds every sample.
    """
    frames = quadrature_frames(manifold, field_)
    far = np.linalg.norm(frames.v, axis=-1) >= FIELD_LOWER_BOUND
    if not np.any(far):
        raise ValueError(f"no quadrature point has |V| >= {FIELD_LOWER_BOUND}")
    v, a = frames.v[far], frames.A[far]
    n = manifold.dim
    sigma_max = float(np.max(np.linalg.norm(a, ord=2, axis=(-2, -1))))
    spectral = float(scalar_spectral(SF.COSH_M1_OVER_THETA_SINH, 2.0 * s * sigma_max))
    if spectral < SPECTRAL_LOWER_BOUND:
        raise ValueError(f"s = {s} too large: spectral bound {spectral:.3g} < {SPECTRAL_LOWER_BOUND}")
    q_norm = float(np.max(np.linalg.norm(clifford_quadratic_batch(a), ord=2, axis=(-2, -1))))
    scaled, bound = [], []
    for t in ts:
        params = KernelParams(s / t, t)
        vals = np.abs(phi0_supertrace_batch(params, v, a)) * (4.0 * math.pi * params.tau) ** (n / 2)
        scaled.append(float(vals.max()))
        bound.append(2.0**n * math.exp(s * q_norm - 2.0 * s * t * spectral * FIELD_LOWER_BOUND**2))
    with np.errstate(divide="ignore"):
        slope = float(np.polyfit(ts, np.log(np.maximum(scaled, 1e-300)), 1)[0])
    return DecayReport(tuple(float(t) for t in ts), tuple(scaled), tuple(bound),
                       -slope / (s * FIELD_LOWER_BOUND**2),
                       bool(all(x <= b for x, b in zip(scaled, bound))),
                       bool(slope < 0.0 and all(np.diff(scaled) <= 0.0)))
