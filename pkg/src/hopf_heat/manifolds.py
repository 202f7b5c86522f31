from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

import numpy as np

from .mehler_kernel import ChartError, FrameData

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50
ZERO_TOL = 1e-10
DEGENERATE_DET = 1e-8
SEED_CELLS = 32
CHART_EPS = 1e-6
FD_STEP = 1e-5


class DegenerateZeroError(ValueError):
    pass


class NewtonConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelManifold:
    """Flat torus T^n of side 2π (n = 1, 2) or the unit sphere S².

    Torus points are coordinates in [0, 2π)^n; sphere points are unit vectors
    in R³. grid is N per axis for tori and (polar, azimuth) node counts for S².
    """

    kind: str
    dim: int
    grid: tuple[int, ...]

    def __post_init__(self) -> None:
        grid = tuple(int(g) for g in self.grid)
        if self.kind == "torus":
            if self.dim not in (1, 2):
                raise ValueError(f"torus dimension must be 1 or 2, got {self.dim}")
            if len(grid) == 1:
                grid = grid * self.dim
            if len(grid) != self.dim:
                raise ValueError(f"torus grid needs {self.dim} sizes, got {grid}")
        elif self.kind == "sphere":
            if self.dim != 2 or len(grid) != 2:
                raise ValueError("sphere is 2-dimensional with a (polar, azimuth) grid")
        else:
            raise ValueError(f"unknown manifold kind {self.kind!r}")
        if any(g < 2 for g in grid):
            raise ValueError(f"grid sizes must be >= 2, got {grid}")
        object.__setattr__(self, "grid", grid)

    @classmethod
    def torus(cls, dim: int, n: int = 64) -> ModelManifold:
        return cls("torus", dim, (n,) * dim)

    @classmethod
    def sphere(cls, n_polar: int = 64, n_azimuth: int = 128) -> ModelManifold:
        return cls("sphere", 2, (n_polar, n_azimuth))

    @property
    def injectivity(self) -> float:
        return math.pi

    @property
    def volume(self) -> float:
        return (2.0 * math.pi) ** self.dim if self.kind == "torus" else 4.0 * math.pi

    @property
    def ambient_dim(self) -> int:
        return self.dim if self.kind == "torus" else 3

    def refined(self, factor: int = 2) -> ModelManifold:
        return ModelManifold(self.kind, self.dim, tuple(g * factor for g in self.grid))

    def quadrature(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "torus":
            axes = [2.0 * math.pi * np.arange(g) / g for g in self.grid]
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
            w = np.prod([2.0 * math.pi / g for g in self.grid])
            return pts, np.full(len(pts), w)
        n_pol, n_az = self.grid
        x, wx = np.polynomial.legendre.leggauss(n_pol)
        polar = np.arccos(x)
        az = 2.0 * math.pi * np.arange(n_az) / n_az
        pp, aa = np.meshgrid(polar, az, indexing="ij")
        pts = chart_to_ambient("z", pp.reshape(-1), aa.reshape(-1))
        w = np.repeat(wx, n_az) * (2.0 * math.pi / n_az)
        return pts, w

    def distance(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        if self.kind == "torus":
            return np.linalg.norm(wrap(q - p), axis=-1)
        cross = np.linalg.norm(np.cross(p, q), axis=-1)
        return np.arctan2(cross, np.sum(p * q, axis=-1))


def wrap(d: np.ndarray) -> np.ndarray:
    """Representative of a torus displacement in (-π, π]."""
    return math.pi - np.mod(math.pi - np.asarray(d, dtype=float), 2.0 * math.pi)


# ---------- sphere charts ----------

SPHERE_CHARTS = ("z", "x")


def _check_chart(chart: str) -> None:
    if chart not in SPHERE_CHARTS:
        raise ChartError(f"unknown sphere chart {chart!r}")


def chart_to_ambient(chart: str, polar: np.ndarray, azimuth: np.ndarray) -> np.ndarray:
    _check_chart(chart)
    polar = np.asarray(polar, dtype=float)
    azimuth = np.asarray(azimuth, dtype=float)
    c = np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=-1)
    return c if chart == "z" else np.roll(c, 1, axis=-1)


def ambient_to_chart(chart: str, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    _check_chart(chart)
    c = np.asarray(p, dtype=float)
    if chart == "x":
        c = np.roll(c, -1, axis=-1)
    polar = np.arccos(np.clip(c[..., 2], -1.0, 1.0))
    azimuth = np.mod(np.arctan2(c[..., 1], c[..., 0]), 2.0 * math.pi)
    return polar, azimuth


def chart_frame(chart: str, polar: np.ndarray, azimuth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal e_polar, e_azimuth; oriented so e1 × e2 is the outward normal."""
    _check_chart(chart)
    polar = np.asarray(polar, dtype=float)
    azimuth = np.asarray(azimuth, dtype=float)
    e1 = np.stack([np.cos(polar) * np.cos(azimuth), np.cos(polar) * np.sin(azimuth), -np.sin(polar)], axis=-1)
    e2 = np.stack([-np.sin(azimuth), np.cos(azimuth), np.zeros_like(azimuth)], axis=-1)
    if chart == "x":
        e1, e2 = np.roll(e1, 1, axis=-1), np.roll(e2, 1, axis=-1)
    return e1, e2


def best_chart(p: np.ndarray) -> np.ndarray:
    """Per point, the chart whose pole is farther away."""
    p = np.asarray(p, dtype=float)
    return np.where(np.abs(p[..., 2]) <= np.abs(p[..., 0]), "z", "x")


def tangent_frame(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chart-free oriented orthonormal tangent frame at unit vectors p."""
    p = np.asarray(p, dtype=float)
    axis = np.zeros_like(p)
    idx = np.argmin(np.abs(p), axis=-1)
    np.put_along_axis(axis, idx[..., None], 1.0, axis=-1)
    e1 = axis - np.sum(axis * p, axis=-1, keepdims=True) * p
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    return e1, np.cross(p, e1)


# ---------- vector fields ----------

@dataclass(frozen=True)
class FourierTerm:
    component: int
    k: tuple[int, ...]
    cos: float = 0.0
    sin: float = 0.0


@dataclass(frozen=True)
class TorusField:
    """v_i(x) = Σ cos_c·cos(k·x) + sin_c·sin(k·x) over terms with component i."""

    name: str
    dim: int
    terms: tuple[FourierTerm, ...] = ()
    kind: str = field(default="torus", init=False)

    def __post_init__(self) -> None:
        for term in self.terms:
            if not 0 <= term.component < self.dim or len(term.k) != self.dim:
                raise ValueError(f"Fourier term {term} does not fit dimension {self.dim}")

    def values(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.dim,))
        for term in self.terms:
            ph = x @ np.asarray(term.k, dtype=float)
            out[..., term.component] += term.cos * np.cos(ph) + term.sin * np.sin(ph)
        return out

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """∂_j v_i, shape (..., n, n)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1] + (self.dim, self.dim))
        for term in self.terms:
            k = np.asarray(term.k, dtype=float)
            ph = x @ k
            out[..., term.component, :] += (-term.cos * np.sin(ph) + term.sin * np.cos(ph))[..., None] * k
        return out


@dataclass(frozen=True)
class SphereField:
    """Tangential projection of the affine ambient field W(p) = M p + c."""

    name: str
    matrix: tuple[tuple[float, ...], ...] = ((0.0,) * 3,) * 3
    constant: tuple[float, ...] = (0.0, 0.0, 0.0)
    kind: str = field(default="sphere", init=False)

    def __post_init__(self) -> None:
        if np.shape(self.matrix) != (3, 3) or np.shape(self.constant) != (3,):
            raise ValueError("sphere field needs a 3x3 matrix and a 3-vector")

    @property
    def dim(self) -> int:
        return 2

    @property
    def m(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=float)

    def ambient(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.m.T + np.asarray(self.constant, dtype=float)

    def tangent(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        w = self.ambient(p)
        return w - np.sum(w * p, axis=-1, keepdims=True) * p

    def frame_components(self, p: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
        w = self.ambient(p)
        return np.stack([np.sum(w * e1, axis=-1), np.sum(w * e2, axis=-1)], axis=-1)


VectorFieldSpec = Union[TorusField, SphereField]


def _fourier(name: str, dim: int, *terms: tuple[int, tuple[int, ...], float, float]) -> TorusField:
    return TorusField(name, dim, tuple(FourierTerm(c, k, co, si) for c, k, co, si in terms))


_ROT = ((0.0, -1.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 0.0))

PRESETS: dict[str, VectorFieldSpec] = {
    "circle-zero": _fourier("circle-zero", 1),
    "circle-sin": _fourier("circle-sin", 1, (0, (1,), 0.0, 1.0)),
    "torus-zero": _fourier("torus-zero", 2),
    "torus-sin": _fourier("torus-sin", 2, (0, (1, 0), 0.0, 1.0), (1, (0, 1), 0.0, 1.0)),
    "torus-sin-perturbed": _fourier(
        "torus-sin-perturbed", 2,
        (0, (1, 0), 0.0, 1.0), (1, (0, 1), 0.0, 1.0),
        (0, (1, 1), 0.05, 0.0), (1, (1, -1), 0.0, 0.05),
    ),
    "sphere-zero": SphereField("sphere-zero"),
    # gradient of the height z
    "sphere-height": SphereField("sphere-height", constant=(0.0, 0.0, 1.0)),
    # -grad(z + x²): saddle at the north pole, minimum at the south pole, two maxima
    "sphere-four-zero": SphereField(
        "sphere-four-zero", matrix=((-2.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
        constant=(0.0, 0.0, -1.0)),
    "sphere-rotation": SphereField("sphere-rotation", matrix=_ROT),
    "sphere-tilted-rotation": SphereField("sphere-tilted-rotation", matrix=_ROT, constant=(0.0, 0.0, 0.5)),
}


def vector_field(spec: str | Mapping[str, Any], manifold: ModelManifold) -> VectorFieldSpec:
    """Resolve a preset name or a coefficient mapping against a manifold."""
    if isinstance(spec, str):
        spec = {"preset": spec}
    if "preset" in spec:
        name = spec["preset"]
        if name not in PRESETS:
            raise ValueError(f"unknown vector field preset: {name!r}")
        out = PRESETS[name]
    elif "fourier" in spec:
        terms = tuple(
            FourierTerm(int(t["component"]), tuple(int(k) for k in t["k"]),
                        float(t.get("cos", 0.0)), float(t.get("sin", 0.0)))
            for t in spec["fourier"]
        )
        out = TorusField(str(spec.get("name", "fourier")), manifold.dim, terms)
    elif "ambient" in spec:
        amb = spec["ambient"]
        out = SphereField(str(spec.get("name", "ambient")),
                          tuple(tuple(float(x) for x in row) for row in amb.get("matrix", ((0.0,) * 3,) * 3)),
                          tuple(float(x) for x in amb.get("constant", (0.0, 0.0, 0.0))))
    else:
        raise ValueError("vector field spec needs 'preset', 'fourier' or 'ambient'")
    if out.kind != manifold.kind or out.dim != manifold.dim:
        raise ValueError(f"vector field {out.name!r} does not live on a {manifold.kind} of dim {manifold.dim}")
    return out


# ---------- frame data ----------

def _sphere_chart_frames(field_: SphereField, chart: str, polar: np.ndarray, azimuth: np.ndarray,
                         h: float = FD_STEP) -> tuple[np.ndarray, np.ndarray]:
    """(v, A) in the normalized coordinate frame by differencing in the chart."""
    sin = np.sin(polar)
    if np.any(sin < CHART_EPS):
        raise ChartError(f"point too close to the pole of chart {chart!r}")
    cot = np.cos(polar) / sin

    def comps(pol: np.ndarray, az: np.ndarray) -> np.ndarray:
        e1, e2 = chart_frame(chart, pol, az)
        return field_.frame_components(chart_to_ambient(chart, pol, az), e1, e2)

    v = comps(polar, azimuth)
    d_pol = (comps(polar + h, azimuth) - comps(polar - h, azimuth)) / (2.0 * h)
    d_az = (comps(polar, azimuth + h) - comps(polar, azimuth - h)) / (2.0 * h) / sin[..., None]
    a = np.empty(v.shape + (2,))
    a[..., 0, 0] = d_pol[..., 0]
    a[..., 1, 0] = d_pol[..., 1]
    # ∇_{e2} e1 = cot e2, ∇_{e2} e2 = -cot e1
    a[..., 0, 1] = d_az[..., 0] - v[..., 1] * cot
    a[..., 1, 1] = d_az[..., 1] + v[..., 0] * cot
    return v, a


def ambient_frame_data(field_: SphereField, p: np.ndarray, e1: np.ndarray, e2: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Exact (v, A) for affine ambient fields: A_ij = e_i·M e_j - (W·p)δ_ij."""
    p = np.asarray(p, dtype=float)
    frame = np.stack([e1, e2], axis=-1)
    v = field_.frame_components(p, e1, e2)
    wp = np.sum(field_.ambient(p) * p, axis=-1)
    a = np.einsum("...ki,kl,...lj->...ij", frame, field_.m, frame) - wp[..., None, None] * np.eye(2)
    return v, a


def frame_batch(manifold: ModelManifold, field_: VectorFieldSpec, points: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=float)
    if manifold.kind == "torus":
        return field_.values(points), field_.jacobian(points)
    charts = best_chart(points)
    v = np.empty(points.shape[:-1] + (2,))
    a = np.empty(points.shape[:-1] + (2, 2))
    for chart in SPHERE_CHARTS:
        sel = charts == chart
        if np.any(sel):
            pol, az = ambient_to_chart(chart, points[sel])
            v[sel], a[sel] = _sphere_chart_frames(field_, chart, pol, az)
    return v, a


def frame_data_at(manifold: ModelManifold, field_: VectorFieldSpec, p: np.ndarray,
                  chart: str | None = None) -> FrameData:
    p = np.asarray(p, dtype=float)
    if manifold.kind == "torus":
        return FrameData(field_.values(p), field_.jacobian(p))
    chart = chart or str(best_chart(p))
    pol, az = ambient_to_chart(chart, p)
    v, a = _sphere_chart_frames(field_, chart, np.atleast_1d(pol), np.atleast_1d(az))
    return FrameData(v[0], a[0])


def chart_rotation(p: np.ndarray, from_chart: str, to_chart: str) -> np.ndarray:
    """R with (v, A) in to_chart = (R v, R A Rᵀ) for (v, A) in from_chart."""
    src = chart_frame(from_chart, *ambient_to_chart(from_chart, p))
    dst = chart_frame(to_chart, *ambient_to_chart(to_chart, p))
    return np.array([[dst[i] @ src[j] for j in range(2)] for i in range(2)])


# ---------- zeros ----------

@dataclass(frozen=True)
class ZeroPoint:
    point: tuple[float, ...]
    chart: str
    coordinates: tuple[float, ...]
    A: np.ndarray
    index: int

    def to_dict(self) -> dict[str, Any]:
        return {"chart": self.chart, "coordinates": list(self.coordinates), "point": list(self.point),
                "A": self.A.tolist(), "det_A": float(np.linalg.det(self.A)), "index": self.index}


def _local_minima(vals: np.ndarray, periodic: tuple[bool, ...]) -> np.ndarray:
    mask = np.ones(vals.shape, dtype=bool)
    for ax, per in enumerate(periodic):
        for shift in (1, -1):
            nb = np.roll(vals, shift, axis=ax)
            if not per:
                edge = [slice(None)] * vals.ndim
                edge[ax] = 0 if shift == 1 else -1
                nb[tuple(edge)] = np.inf
            mask &= vals <= nb
    return mask


def _torus_seeds(field_: TorusField, dim: int) -> tuple[np.ndarray, np.ndarray, float]:
    ax = 2.0 * math.pi * (np.arange(SEED_CELLS) + 0.5) / SEED_CELLS
    grid = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1)
    vals = np.linalg.norm(field_.values(grid), axis=-1)
    lip = float(np.max(np.linalg.norm(field_.jacobian(grid), ord=2, axis=(-2, -1))))
    mask = _local_minima(vals, (True,) * dim)
    return grid[mask], vals[mask], lip * (2.0 * math.pi / SEED_CELLS) * math.sqrt(dim)


def _sphere_seeds(field_: SphereField) -> tuple[np.ndarray, np.ndarray, float]:
    pol = math.pi * (np.arange(SEED_CELLS) + 0.5) / SEED_CELLS
    az = 2.0 * math.pi * np.arange(2 * SEED_CELLS) / (2 * SEED_CELLS)
    pp, aa = np.meshgrid(pol, az, indexing="ij")
    pts = chart_to_ambient("z", pp, aa)
    vals = np.linalg.norm(field_.tangent(pts), axis=-1)
    e1, e2 = tangent_frame(pts)
    _, a = ambient_frame_data(field_, pts, e1, e2)
    lip = float(np.max(np.linalg.norm(a, ord=2, axis=(-2, -1))))
    mask = _local_minima(vals, (False, True))
    return pts[mask], vals[mask], lip * (math.pi / SEED_CELLS) * math.sqrt(2.0)


def _newton_torus(field_: TorusField, x: np.ndarray) -> tuple[np.ndarray, bool]:
    for _ in range(NEWTON_MAX_ITER):
        f = field_.values(x)
        if np.linalg.norm(f) < NEWTON_TOL:
            return np.mod(x, 2.0 * math.pi), True
        try:
            step = np.linalg.solve(field_.jacobian(x), f)
        except np.linalg.LinAlgError:
            return x, False
        x = x - step
        if np.linalg.norm(step) < NEWTON_TOL:
            break
    x = np.mod(x, 2.0 * math.pi)
    return x, bool(np.linalg.norm(field_.values(x)) < ZERO_TOL)


def _newton_sphere(field_: SphereField, p: np.ndarray) -> tuple[np.ndarray, bool]:
    for _ in range(NEWTON_MAX_ITER):
        e1, e2 = tangent_frame(p)
        v, a = ambient_frame_data(field_, p, e1, e2)
        if np.linalg.norm(v) < NEWTON_TOL:
            return p, True
        try:
            d = np.linalg.solve(a, v)
        except np.linalg.LinAlgError:
            return p, False
        p = p - d[0] * e1 - d[1] * e2
        p = p / np.linalg.norm(p)
        if np.linalg.norm(d) < NEWTON_TOL:
            break
    return p, bool(np.linalg.norm(field_.tangent(p)) < ZERO_TOL)


def find_zeros(manifold: ModelManifold, field_: VectorFieldSpec) -> list[ZeroPoint]:
    """Newton from local minima of |V| on a 32^n seed grid, deduplicated."""
    if manifold.kind == "torus":
        seeds, vals, reach = _torus_seeds(field_, manifold.dim)
        newton = _newton_torus
    else:
        seeds, vals, reach = _sphere_seeds(field_)
        newton = _newton_sphere
    found: list[np.ndarray] = []
    for seed, val in zip(seeds, vals):
        if val > reach:
            continue
        root, ok = newton(field_, seed)
        if not ok:
            raise NewtonConvergenceError(f"Newton did not converge from seed {seed.tolist()} (|V| = {val:.3g})")
        found.append(root)
    radius = manifold.injectivity / 10.0
    kept: list[np.ndarray] = []
    for root in sorted(found, key=lambda r: tuple(np.round(r, 9))):
        if all(float(manifold.distance(root, k)) >= radius for k in kept):
            kept.append(root)
    zeros = []
    for root in kept:
        if manifold.kind == "torus":
            chart, coords = "torus", tuple(float(c) for c in root)
        else:
            chart = str(best_chart(root))
            coords = tuple(float(c) for c in ambient_to_chart(chart, root))
        a = frame_data_at(manifold, field_, root, chart=None if chart == "torus" else chart).A
        det = float(np.linalg.det(a))
        if abs(det) < DEGENERATE_DET:
            raise DegenerateZeroError(
                f"zero at {root.tolist()} has det A = {det:.3g}; the field must have nondegenerate zeros")
        zeros.append(ZeroPoint(tuple(float(c) for c in root), chart, coords, a, 1 if det > 0 else -1))
    return zeros


def euler_via_indices(zeros: list[ZeroPoint]) -> int:
    return int(sum(z.index for z in zeros))
