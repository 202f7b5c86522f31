from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import gammaln, ive, logsumexp

from .exterior_algebra import ExteriorOperator, clifford_quadratic_batch, degrees, exp_batch, grading
from .manifolds import ModelManifold, TorusField, wrap
from .mehler_kernel import CutoffSpec, EnvelopeFit, MehlerPhi, fit_gaussian_envelope
from .witten_laplacian import assemble_box_t, check_dimension, discrete_complex, heat_kernel_exact

DECAY_TOL = 1e-8
MAX_TERMS = 10
DIVERGENCE_FROM = 4
# cutoff transition as fractions of the injectivity radius; at 64 points per
# circle the smooth profile is resolved well past the grid frequency
LEVI_CUTOFF = (0.3, 0.7)
LEVI_SHARPNESS = 1.5


class GridMismatchError(ValueError):
    pass


class LeviDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class KernelGrid:
    """Kernel matrices on a uniform time grid; node 0 is ν = 0.

    values[k] is a square matrix over (grid point, form) whose (q, p) block is
    the kernel at (ν_k, q, p). weight is the spatial quadrature weight used
    when composing kernels.
    """

    nodes: np.ndarray
    values: np.ndarray
    weight: float
    forms: int

    def __post_init__(self) -> None:
        nodes = np.asarray(self.nodes, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 3 or vals.shape[0] != nodes.size or vals.shape[1] != vals.shape[2]:
            raise GridMismatchError(f"values {vals.shape} do not match {nodes.size} nodes")
        if np.any(np.diff(nodes) <= 0.0):
            raise ValueError("time grid must be strictly increasing")
        if not np.all(np.isfinite(vals)):
            raise ValueError("kernel grid holds non-finite values")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", vals)

    @property
    def step(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def points_count(self) -> int:
        return self.values.shape[1] // self.forms

    def block(self, k: int, q: int, p: int) -> ExteriorOperator:
        f = self.forms
        return ExteriorOperator(int(round(math.log2(f))), self.values[k, q * f:(q + 1) * f, p * f:(p + 1) * f])

    def block_norms(self) -> np.ndarray:
        """|ψ| = √tr ψψ* of every (q, p) block, shape (nodes, q, p)."""
        p, f = self.points_count, self.forms
        v = self.values.reshape(-1, p, f, p, f)
        return np.sqrt(np.sum(v * v, axis=(2, 4)))

    def sup_norm(self) -> float:
        return float(self.block_norms().max())

    def with_values(self, values: np.ndarray) -> KernelGrid:
        return KernelGrid(self.nodes, values, self.weight, self.forms)


class LeviContext:
    """Parametrix data on a flat torus for the Levi series.

    Y = wrap(x_q - x_p) are the global normal coordinates; arrays indexed
    [p, q] keep the centre p first.
    """

    def __init__(self, manifold: ModelManifold, field_: TorusField, t: float, tau: float, *,
                 steps: int = 64, cutoff: CutoffSpec | None = None) -> None:
        if manifold.kind != "torus":
            raise ValueError("Levi iteration runs on flat tori only")
        if not tau > 0.0 or steps < 2:
            raise ValueError(f"need tau > 0 and at least 2 time steps, got {tau}, {steps}")
        self.manifold = manifold
        self.field = field_
        self.t = float(t)
        self.tau = float(tau)
        self.cutoff = cutoff or CutoffSpec.from_injectivity(manifold.injectivity, *LEVI_CUTOFF, profile="smooth",
                                                            sharpness=LEVI_SHARPNESS)
        self.complex = discrete_complex(manifold)
        cx = self.complex
        check_dimension(cx.dim)
        self.n = cx.n
        self.forms = cx.forms
        self.weight = cx.weight
        self.points = cx.points
        self.nodes = self.tau * np.arange(steps + 1) / steps
        self.v = field_.values(self.points)
        self.A = field_.jacobian(self.points)
        self.y = wrap(self.points[None, :, :] - self.points[:, None, :])
        self.rho2 = np.sum(self.y * self.y, axis=-1)
        self.chi, self.chi_r, self.chi_rr = self.cutoff.radial(self.rho2)
        self.Q = clifford_quadratic_batch(self.A)
        lin = self.t * (self.v[:, None, :] + np.einsum("pij,pqj->pqi", self.A, self.y))
        self.potential = self.t**2 * np.sum(self.v * self.v, axis=-1)[None, :] - np.sum(lin * lin, axis=-1)
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.complex.dim

    @property
    def steps(self) -> int:
        return self.nodes.size - 1

    def _phi(self, nu: float) -> tuple[np.ndarray, np.ndarray]:
        ev = MehlerPhi(nu, self.t * self.v, self.t * np.swapaxes(self.A, -1, -2))
        val = ev.value(self.y)
        return val, val[..., None] * ev.grad_log(self.y)

    def _transport(self, nu: float) -> np.ndarray:
        return exp_batch(clifford_quadratic_batch(nu * self.t * self.A))

    def _assemble(self, scalar: np.ndarray, ops: np.ndarray) -> np.ndarray:
        """Block (q, p) = scalar[p, q]·ops[p]."""
        return np.einsum("pq,pfg->qfpg", scalar, ops).reshape(self.dim, self.dim)

    def parametrix_matrix(self, nu: float) -> np.ndarray:
        if nu == 0.0:
            return np.eye(self.dim) / self.weight
        val, _ = self._phi(nu)
        return self._assemble(self.chi * val, self._transport(nu))

    def k0_matrix(self, nu: float) -> np.ndarray:
        """(∂_ν + □_t)H with analytic derivatives of Φ and of the cutoff."""
        if nu == 0.0:
            return np.zeros((self.dim, self.dim))
        val, grad = self._phi(nu)
        u = self._transport(nu)
        grad_chi = 2.0 * self.y * self.chi_r[..., None]
        lap_chi = 2.0 * self.n * self.chi_r + 4.0 * self.rho2 * self.chi_rr
        cphi = self.chi * val
        scalar = cphi * self.potential - (2.0 * np.sum(grad * grad_chi, axis=-1) + val * lap_chi)
        out = np.einsum("pq,pfg->qfpg", scalar, u)
        out += self.t * np.einsum("pq,pfg->qfpg", cphi, self.Q @ u)
        out -= self.t * np.einsum("pq,qfh,phg->qfpg", cphi, self.Q, u)
        return out.reshape(self.dim, self.dim)

    def _stack(self, kind: str, fn: Callable[[float], np.ndarray]) -> np.ndarray:
        out = np.empty((self.nodes.size, self.dim, self.dim))
        for k, nu in enumerate(self.nodes):
            key = (kind, k)
            if key not in self._cache:
                self._cache[key] = fn(float(nu))
            out[k] = self._cache[key]
        return out

    def parametrix_grid(self) -> KernelGrid:
        return KernelGrid(self.nodes, self._stack("H", self.parametrix_matrix), self.weight, self.forms)

    def k0_grid(self) -> KernelGrid:
        return KernelGrid(self.nodes, self._stack("K0", self.k0_matrix), self.weight, self.forms)


def k0(ctx: LeviContext, nu: float, q: int, p: int) -> ExteriorOperator:
    f = ctx.forms
    return ExteriorOperator(ctx.n, ctx.k0_matrix(float(nu))[q * f:(q + 1) * f, p * f:(p + 1) * f])


def _trapezoid(k: int, step: float) -> np.ndarray:
    w = np.full(k + 1, step)
    w[0] = w[-1] = 0.5 * step
    return w


def spacetime_convolve(k0_grid: KernelGrid, km: KernelGrid) -> KernelGrid:
    """∫_0^ν dμ ∫ K0(ν - μ, q, z) Km(μ, z, p) dz on the shared uniform grid."""
    if (k0_grid.nodes.shape != km.nodes.shape or not np.allclose(k0_grid.nodes, km.nodes, rtol=0.0, atol=1e-15)
            or k0_grid.values.shape != km.values.shape or k0_grid.weight != km.weight):
        raise GridMismatchError("kernel grids differ in nodes, shape or spatial weight")
    steps = np.diff(k0_grid.nodes)
    if not np.allclose(steps, steps[0], rtol=1e-12, atol=0.0):
        raise GridMismatchError("convolution needs a uniform time grid")
    a, b = k0_grid.values, km.values
    out = np.zeros_like(b)
    for k in range(1, a.shape[0]):
        j = np.arange(k + 1)
        prods = np.matmul(a[k - j], b[j])
        out[k] = np.tensordot(_trapezoid(k, float(steps[0])), prods, axes=1) * km.weight
    return km.with_values(out)


@dataclass(frozen=True)
class FactorialFit:
    a: float
    b: float
    residual: float
    bound: float = math.nan


def fit_factorial_decay(norms: Sequence[float], tau: float, max_m: int = 5, *, first: int = 1) -> FactorialFit:
    """Least squares of log‖K_m‖ + log m! = log a + m log(bτ) over first <= m <= max_m.

    ‖K_0‖ is a pointwise sup of a kernel that is O(ν) only as an operator, so
    it sits above the trend the compositions follow; it is left out of the
    fit by default and covered by bound instead, the smallest a' with
    ‖K_m‖ <= a'(bτ)^m/m! for every given m. Fewer than two usable terms from
    first on fall back to fitting from m = 0.
    """
    m_all = np.arange(min(len(norms), max_m + 1))
    vals_all = np.asarray(norms, dtype=float)[: m_all.size]
    pick = (vals_all > 0.0) & (m_all >= first)
    if np.count_nonzero(pick) < 2:
        pick = vals_all > 0.0
    m, vals = m_all[pick], vals_all[pick]
    if m.size < 2:
        a = float(vals[0]) if vals.size else 0.0
        return FactorialFit(a, 0.0, 0.0, a)
    slope, intercept = np.polyfit(m, np.log(vals) + gammaln(m + 1), 1)
    a, b = math.exp(intercept), math.exp(slope) / tau
    model = a * (b * tau) ** m / np.exp(gammaln(m + 1))
    every = np.arange(len(norms))
    bound = float(np.max(np.asarray(norms, dtype=float) * np.exp(gammaln(every + 1)) / (b * tau) ** every))
    return FactorialFit(a, b, float(np.max(np.abs(vals / model - 1.0))), bound)


@dataclass(frozen=True, eq=False)
class LeviSum:
    kernel: KernelGrid
    norms: tuple[float, ...]
    terms: int
    converged: bool


def levi_sum(k0_grid: KernelGrid, terms: int | None = None, *, tol: float = DECAY_TOL,
             cap: int = MAX_TERMS) -> LeviSum:
    """K = Σ_{m<M} (-1)^{m+1} K_m; M adaptive unless given."""
    if terms is not None and terms < 1:
        raise ValueError(f"truncation must be >= 1, got {terms}")
    limit = terms if terms is not None else cap
    km = k0_grid
    total = -k0_grid.values.copy()
    norms = [k0_grid.sup_norm()]
    converged = norms[0] == 0.0
    m = 1
    while m < limit and not converged:
        km = spacetime_convolve(k0_grid, km)
        norm = km.sup_norm()
        if m >= DIVERGENCE_FROM and norm > norms[-1]:
            raise LeviDivergenceError(f"Levi terms stopped decaying at m={m}: {norms[-1]:.3g} -> {norm:.3g}")
        norms.append(norm)
        total += (-1) ** (m + 1) * km.values
        m += 1
        if terms is None and norm < tol * norms[0]:
            converged = True
    return LeviSum(k0_grid.with_values(total), tuple(norms), m, converged or norms[-1] < tol * norms[0])


def reconstruct_G(ctx: LeviContext, kernel: KernelGrid) -> KernelGrid:
    """G = H + ∫ H(τ - ν) K(ν) dν at every node; H(0) is the grid delta."""
    h = ctx.parametrix_grid()
    corr = spacetime_convolve(h, kernel)
    return h.with_values(h.values + corr.values)


def _averaging_matrix(n: int, coarse: int, refine: int) -> np.ndarray:
    """Maps staggered fine-grid cochains to coarse vertices by neighbour averaging."""
    forms = 2**n
    fine = coarse * refine
    offsets = discrete_complex(ModelManifold.torus(n, coarse)).offsets.astype(int)
    out = np.zeros((coarse**n * forms, fine**n * forms))
    for g, idx in enumerate(np.ndindex(*([coarse] * n))):
        base = np.asarray(idx) * refine
        for f in range(forms):
            axes = np.flatnonzero(offsets[f])
            corners = list(np.ndindex(*([2] * axes.size)))
            for corner in corners:
                cell = base.copy()
                cell[axes] -= np.asarray(corner, dtype=int)
                flat = int(np.ravel_multi_index(tuple(cell), (fine,) * n, mode="wrap"))
                out[g * forms + f, flat * forms + f] += 1.0 / len(corners)
    return out


def exact_kernel_on_grid(ctx: LeviContext, refine: int = 4) -> np.ndarray:
    """e^{-τ□_t} from the refined discrete complex, read at the coarse vertices."""
    n, coarse = ctx.n, ctx.complex.N
    fine = ModelManifold.torus(n, coarse * refine)
    cx = discrete_complex(fine)
    g = heat_kernel_exact(assemble_box_t(fine, ctx.field, ctx.t), ctx.tau) / cx.weight
    avg = _averaging_matrix(n, coarse, refine)
    return avg @ g @ avg.T


def theta_series_kernel(tau: float, d: np.ndarray | float, images: int = 10) -> np.ndarray:
    """Heat kernel of the circle of length 2π at separation d."""
    d = np.asarray(d, dtype=float)
    k = np.arange(-images, images + 1)
    return np.sum(np.exp(-((d[..., None] + 2.0 * math.pi * k) ** 2) / (4.0 * tau)), axis=-1) / math.sqrt(
        4.0 * math.pi * tau)


def _spectral_laplacian(ctx: LeviContext, g: np.ndarray) -> np.ndarray:
    """Δ in the q variable of a (q·forms, D) matrix by FFT."""
    n, N = ctx.n, ctx.complex.N
    shape = (N,) * n + (ctx.forms, g.shape[1])
    arr = g.reshape(shape)
    k = np.fft.fftfreq(N, d=1.0 / N)
    ksq = sum(np.meshgrid(*([k * k] * n), indexing="ij"))
    spec = np.fft.fftn(arr, axes=tuple(range(n)))
    spec *= -ksq.reshape(ksq.shape + (1, 1))
    return np.real(np.fft.ifftn(spec, axes=tuple(range(n)))).reshape(g.shape)


def _low_pass(ctx: LeviContext, g: np.ndarray, modes: int) -> np.ndarray:
    """Keep the Fourier modes |k_i| <= modes of a (q·forms, D) matrix in q."""
    n, N = ctx.n, ctx.complex.N
    shape = (N,) * n + (ctx.forms, g.shape[1])
    k = np.abs(np.fft.fftfreq(N, d=1.0 / N))
    keep = np.ones((N,) * n, dtype=bool)
    for grid in np.meshgrid(*([k] * n), indexing="ij"):
        keep &= grid <= modes
    spec = np.fft.fftn(g.reshape(shape), axes=tuple(range(n)))
    spec *= keep.reshape(keep.shape + (1, 1))
    return np.real(np.fft.ifftn(spec, axes=tuple(range(n)))).reshape(g.shape)


def heat_residual(ctx: LeviContext, g: KernelGrid, modes: int | None = None) -> float:
    """Weak residual max|P(∂_τ + □_t)G| / max|P ∂_τ G| at the last interior node.

    P keeps the Fourier modes |k| <= modes in q (N/8 by default), i.e. G is
    tested against smooth functions.
    """
    modes = max(1, ctx.complex.N // 8) if modes is None else modes
    k = g.nodes.size - 2
    dg = (g.values[k + 1] - g.values[k - 1]) / (2.0 * g.step)
    mid = g.values[k]
    f = ctx.forms
    pot = np.repeat(ctx.t**2 * np.sum(ctx.v * ctx.v, axis=-1), f)[:, None] * mid
    q_block = np.einsum("qfh,qhd->qfd", ctx.t * ctx.Q, mid.reshape(-1, f, mid.shape[1])).reshape(mid.shape)
    res = _low_pass(ctx, dg - _spectral_laplacian(ctx, mid) + pot - q_block, modes)
    return float(np.abs(res).max() / np.abs(_low_pass(ctx, dg, modes)).max())


def weak_initial_error(ctx: LeviContext, g: KernelGrid,
                       fn: Callable[[np.ndarray], np.ndarray] | None = None,
                       fractions: Sequence[float] = (0.125, 0.25, 0.5, 1.0)) -> dict[str, Any]:
    """max_q |∫ G(ν, q, p) f(p) dp - f(q)| at ν = fraction·τ and its fitted order."""
    fn = fn or (lambda x: 0.5 + np.cos(x).prod(axis=-1))
    fv = fn(ctx.points)
    p, f = len(fv), ctx.forms
    steps = g.nodes.size - 1
    nus, errs = [], []
    for frac in fractions:
        k = max(1, int(round(frac * steps)))
        blocks = g.values[k].reshape(p, f, p, f)
        applied = np.einsum("qfpg,p->qfg", blocks, fv) * g.weight
        target = fv[:, None, None] * np.eye(f)[None, :, :]
        nus.append(float(g.nodes[k]))
        errs.append(float(np.abs(applied - target).max()))
    order = float(np.polyfit(np.log(nus), np.log(errs), 1)[0]) if len(nus) > 1 else math.nan
    return {"nu": nus, "error": errs, "order": order}


def k0_envelope_fit(ctx: LeviContext, c1_grid: Sequence[float] = (1.0, 1.5, 2.0, 4.0, 8.0), *,
                    field_at: str = "source") -> EnvelopeFit:
    """Envelope c0·Q(c1ν)·e^{-ν t²|v|²/c1}·(√ν t + 1) over the whole K0 grid.

    field_at picks where |v| is read: at the source point p or the target q.
    """
    if field_at not in ("source", "target"):
        raise ValueError(f"field_at must be 'source' or 'target', got {field_at!r}")
    grid = ctx.k0_grid()
    norms = grid.block_norms()[1:]
    nu = grid.nodes[1:, None, None]
    rho2 = np.broadcast_to(ctx.rho2.T[None], norms.shape)
    vsq = ctx.t**2 * np.sum(ctx.v * ctx.v, axis=-1)
    vsq = np.broadcast_to(vsq[None, None, :] if field_at == "source" else vsq[None, :, None], norms.shape)
    nu_b = np.broadcast_to(nu, norms.shape)
    with np.errstate(divide="ignore"):
        log_norm = np.log(norms)
    extra = np.log(np.sqrt(nu_b) * ctx.t + 1.0)
    return fit_gaussian_envelope(log_norm, rho2, nu_b, vsq, ctx.n, c1_grid, extra)


def degree_block_leak(g: KernelGrid) -> float:
    """Largest entry coupling forms of different degree."""
    f = g.forms
    deg = degrees(int(round(math.log2(f))))
    mask = np.not_equal.outer(deg, deg)
    p = g.points_count
    v = g.values.reshape(-1, p, f, p, f)
    return float(np.abs(v * mask[None, None, :, None, :]).max())


@dataclass
class IterationReport:
    norms: list[float]
    fit: FactorialFit
    terms: int
    converged: bool
    tail_estimate: float
    defects: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "norms": self.norms,
            "fit": {"a": self.fit.a, "b": self.fit.b, "relative_residual": self.fit.residual,
                    "envelope_a": self.fit.bound},
            "terms": self.terms,
            "converged": self.converged,
            "tail_estimate": self.tail_estimate,
            "defects": self.defects,
        }


def iteration_report(ctx: LeviContext, series: LeviSum, g: KernelGrid, *, refine: int = 4,
                     theta_check: bool = False) -> IterationReport:
    fit = fit_factorial_decay(series.norms, ctx.tau)
    m = series.terms
    tail = fit.bound * (fit.b * ctx.tau) ** m / math.exp(gammaln(m + 1)) * math.exp(fit.b * ctx.tau)
    exact = exact_kernel_on_grid(ctx, refine)
    final = g.values[-1]
    signs = np.tile(grading(ctx.n), len(ctx.points))
    defects = {
        "levi_vs_exact": float(np.abs(final - exact).max()),
        "supertrace": float(np.dot(np.diagonal(final), signs)) * ctx.weight,
        "heat_residual": heat_residual(ctx, g),
    }
    if theta_check:
        diag = np.array([final[i, i] for i in range(final.shape[0])])
        defects["theta_series"] = float(np.abs(diag - float(theta_series_kernel(ctx.tau, 0.0))).max())
    return IterationReport(list(series.norms), fit, m, series.converged, tail, defects)


# ---------- convolution inequality on flat R² ----------

def _log_q2(alpha: float, rho2: np.ndarray | float) -> np.ndarray:
    return -np.log(4.0 * math.pi * alpha) - np.asarray(rho2) / (4.0 * alpha)


def truncated_convolution_log(alpha1: float, alpha2: float, d: float, eps: float, nodes: int) -> float:
    """log ∫_{|z-q|<ε} Q(α₁, q, z) Q(α₂, z, p) dz in R², |q - p| = d.

    The angular integral is 2π e^{-(r-d)²/4α₂} ive(0, rd/2α₂); the radial one is
    Gauss-Legendre on [0, ε].
    """
    x, w = np.polynomial.legendre.leggauss(nodes)
    r = 0.5 * eps * (x + 1.0)
    wr = 0.5 * eps * w * r
    log_ang = (math.log(2.0 * math.pi) - (r - d) ** 2 / (4.0 * alpha2)
               + np.log(ive(0, r * d / (2.0 * alpha2))) - math.log(4.0 * math.pi * alpha2))
    return float(logsumexp(_log_q2(alpha1, r * r) + log_ang, b=wr))


def convolution_ratio(c1: float, c2: float, eps: float, tau: float, nu: float, d: float, nodes: int = 64) -> float:
    conv = truncated_convolution_log(c1 * (tau - nu), c2 * nu, d, eps, nodes)
    return math.exp(conv - float(_log_q2(c2 * tau, d * d)))


@dataclass(frozen=True)
class ConvolutionBoundReport:
    c: float
    c_refined: float
    closed_form: float
    per_fraction: dict[float, float]
    stable: bool
    below_closed_form: bool

    def to_dict(self) -> dict[str, Any]:
        return {"c": self.c, "c_refined": self.c_refined, "closed_form": self.closed_form,
                "per_fraction": [{"nu_over_tau": k, "max_ratio": v} for k, v in self.per_fraction.items()],
                "stable": self.stable, "below_closed_form": self.below_closed_form}


FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def convolution_bound_check(c1: float, c2: float, eps: float, samples: int, rng: np.random.Generator, *,
                            nodes: int = 64, fractions: Sequence[float] = FRACTIONS) -> ConvolutionBoundReport:
    """Sup of the truncated convolution ratio, then again with doubled samples and nodes."""
    if not 0.0 < c1 < c2:
        raise ValueError(f"need 0 < c1 < c2, got {c1}, {c2}")
    if samples < 1:
        raise ValueError("samples must be positive")
    draws = 2 * samples
    tau = eps * eps * rng.uniform(0.05, 1.0, draws)
    d = eps * np.sqrt(rng.uniform(0.0, 1.0, draws))

    def sweep(count: int, quad: int) -> dict[float, float]:
        return {float(fr): max(convolution_ratio(c1, c2, eps, tau[i], fr * tau[i], d[i], quad) for i in range(count))
                for fr in fractions}

    base = sweep(samples, nodes)
    refined = sweep(draws, 2 * nodes)
    c, c_ref = max(base.values()), max(refined.values())
    closed = c2 / c1
    return ConvolutionBoundReport(c, c_ref, closed, base, abs(c_ref - c) <= 0.2 * c,
                                  max(c, c_ref) <= closed * (1 + 1e-9))
