from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Any

import mpmath
import numpy as np
import scipy.linalg

# Basis of Λ*(R^n): index sets grouped by degree, lexicographic inside a degree.
# For n = 2 that is 1, ω1, ω2, ω1∧ω2. Every sign below derives from this order.

MAX_DIM = 8
EXP_NORM_LIMIT = 700.0


class DimensionError(ValueError):
    pass


class OperatorOverflowError(RuntimeError):
    pass


@dataclass(frozen=True)
class BasisForm:
    index_set: tuple[int, ...]

    def __post_init__(self) -> None:
        idx = self.index_set
        if any(i < 1 for i in idx) or any(a >= b for a, b in zip(idx, idx[1:])):
            raise ValueError(f"index set must be strictly increasing and 1-based: {idx}")

    @property
    def degree(self) -> int:
        return len(self.index_set)


def check_dim(n: int) -> int:
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise DimensionError(f"dimension must be a positive integer, got {n!r}")
    if n > MAX_DIM:
        raise DimensionError(f"dimension {n} exceeds the cap of {MAX_DIM}")
    return int(n)


@lru_cache(maxsize=None)
def basis(n: int) -> tuple[BasisForm, ...]:
    n = check_dim(n)
    return tuple(
        BasisForm(tuple(c))
        for k in range(n + 1)
        for c in combinations(range(1, n + 1), k)
    )


@lru_cache(maxsize=None)
def basis_index(n: int) -> dict[tuple[int, ...], int]:
    return {b.index_set: i for i, b in enumerate(basis(n))}


@lru_cache(maxsize=None)
def _degrees(n: int) -> tuple[int, ...]:
    return tuple(b.degree for b in basis(n))


def degrees(n: int) -> np.ndarray:
    return np.array(_degrees(n), dtype=np.int64)


def grading(n: int) -> np.ndarray:
    """(-1)^deg of each basis form, as an int vector."""
    return np.where(degrees(n) % 2 == 0, 1, -1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class ExteriorOperator:
    n: int
    matrix: np.ndarray

    def __post_init__(self) -> None:
        n = check_dim(self.n)
        m = np.array(self.matrix, copy=True)
        size = 2**n
        if m.shape != (size, size):
            raise DimensionError(f"expected a {size}x{size} matrix for n={n}, got {m.shape}")
        if m.dtype.kind == "f" and not np.all(np.isfinite(m)):
            raise ValueError("operator has non-finite entries")
        m.setflags(write=False)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, n: int, dtype: Any = np.int64) -> ExteriorOperator:
        return cls(n, np.eye(2 ** check_dim(n), dtype=dtype))

    @classmethod
    def zero(cls, n: int, dtype: Any = np.int64) -> ExteriorOperator:
        size = 2 ** check_dim(n)
        return cls(n, np.zeros((size, size), dtype=dtype))

    @property
    def dim(self) -> int:
        return 2**self.n

    def _same(self, other: ExteriorOperator) -> None:
        if not isinstance(other, ExteriorOperator):
            raise TypeError(f"expected ExteriorOperator, got {type(other).__name__}")
        if other.n != self.n:
            raise DimensionError(f"operator dimensions differ: {self.n} vs {other.n}")

    def __matmul__(self, other: ExteriorOperator) -> ExteriorOperator:
        self._same(other)
        return ExteriorOperator(self.n, self.matrix @ other.matrix)

    def __add__(self, other: ExteriorOperator) -> ExteriorOperator:
        self._same(other)
        return ExteriorOperator(self.n, self.matrix + other.matrix)

    def __sub__(self, other: ExteriorOperator) -> ExteriorOperator:
        self._same(other)
        return ExteriorOperator(self.n, self.matrix - other.matrix)

    def __neg__(self) -> ExteriorOperator:
        return ExteriorOperator(self.n, -self.matrix)

    def __mul__(self, c: float) -> ExteriorOperator:
        return ExteriorOperator(self.n, self.matrix * c)

    __rmul__ = __mul__

    @property
    def T(self) -> ExteriorOperator:
        return ExteriorOperator(self.n, self.matrix.T)

    def astype(self, dtype: Any) -> ExteriorOperator:
        return ExteriorOperator(self.n, self.matrix.astype(dtype))

    def equals(self, other: ExteriorOperator) -> bool:
        self._same(other)
        return bool(np.array_equal(self.matrix, other.matrix))

    def allclose(self, other: ExteriorOperator, *, rtol: float = 0.0, atol: float = 1e-12) -> bool:
        self._same(other)
        return bool(np.allclose(self.matrix, other.matrix, rtol=rtol, atol=atol))

    def parity_mask(self) -> np.ndarray:
        """True on entries that connect forms of different degree parity."""
        g = grading(self.n)
        return np.not_equal.outer(g, g)

    def parity(self) -> int:
        """0 for even operators, 1 for odd; raises for mixed ones."""
        odd = self.parity_mask()
        nz = self.matrix != 0
        if not np.any(nz & odd):
            return 0
        if not np.any(nz & ~odd):
            return 1
        raise ValueError("operator is neither even nor odd")

    def is_even(self) -> bool:
        return not np.any((self.matrix != 0) & self.parity_mask())


def _check_index(n: int, j: int) -> None:
    if not 1 <= j <= n:
        raise IndexError(f"index j={j} out of range 1..{n}")


@lru_cache(maxsize=None)
def _creation_matrix(n: int, j: int) -> np.ndarray:
    size = 2**n
    out = np.zeros((size, size), dtype=np.int64)
    where = basis_index(n)
    for col, form in enumerate(basis(n)):
        idx = form.index_set
        if j in idx:
            continue
        # sorting ω_I ∧ ω_j moves ω_j left past every index above j
        sign = -1 if sum(1 for i in idx if i > j) % 2 else 1
        out[where[tuple(sorted(idx + (j,)))], col] = sign
    out.setflags(write=False)
    return out


def creation(n: int, j: int) -> ExteriorOperator:
    n = check_dim(n)
    _check_index(n, j)
    return ExteriorOperator(n, _creation_matrix(n, j))


def annihilation(n: int, j: int) -> ExteriorOperator:
    n = check_dim(n)
    _check_index(n, j)
    return ExteriorOperator(n, _creation_matrix(n, j).T)


def e_plus(n: int, j: int) -> ExteriorOperator:
    return creation(n, j) + annihilation(n, j)


def e_minus(n: int, j: int) -> ExteriorOperator:
    return creation(n, j) - annihilation(n, j)


def supertrace(op: ExteriorOperator) -> float | int:
    """Trace on even forms minus trace on odd forms."""
    val = np.dot(np.diagonal(op.matrix), grading(op.n))
    return int(val) if op.matrix.dtype.kind in "iu" else float(val)


def supercommutator(a: ExteriorOperator, b: ExteriorOperator) -> ExteriorOperator:
    sign = -1 if a.parity() * b.parity() else 1
    return a @ b - (b @ a) * sign


def anticommutator(a: ExteriorOperator, b: ExteriorOperator) -> ExteriorOperator:
    return a @ b + b @ a


def product(*ops: ExteriorOperator) -> ExteriorOperator:
    if not ops:
        raise ValueError("product of no operators")
    out = ops[0]
    for op in ops[1:]:
        out = out @ op
    return out


@lru_cache(maxsize=None)
def _pair_products(n: int) -> np.ndarray:
    """E⁺_j E⁻_k stacked as an (n, n, 2^n, 2^n) integer array."""
    size = 2**n
    out = np.zeros((n, n, size, size), dtype=np.int64)
    for j in range(1, n + 1):
        ep = e_plus(n, j).matrix
        for k in range(1, n + 1):
            out[j - 1, k - 1] = ep @ e_minus(n, k).matrix
    out.setflags(write=False)
    return out


def clifford_quadratic_batch(v: np.ndarray) -> np.ndarray:
    """Σ_jk v_jk E⁺_j E⁻_k for a stack of n×n coefficient matrices."""
    v = np.asarray(v, dtype=float)
    n = check_dim(v.shape[-1])
    if v.shape[-2:] != (n, n):
        raise DimensionError(f"coefficients must be square, got {v.shape}")
    return np.einsum("...jk,jkab->...ab", v, _pair_products(n))


def clifford_quadratic(v: np.ndarray) -> ExteriorOperator:
    v = np.asarray(v, dtype=float)
    return ExteriorOperator(v.shape[-1], clifford_quadratic_batch(v))


def exp_operator(op: ExteriorOperator) -> ExteriorOperator:
    m = np.asarray(op.matrix, dtype=float)
    norm = float(np.abs(m).sum(axis=0).max()) if m.size else 0.0
    if norm > EXP_NORM_LIMIT:
        raise OperatorOverflowError(f"operator 1-norm {norm:.3g} too large to exponentiate")
    out = scipy.linalg.expm(m)
    if not np.all(np.isfinite(out)):
        raise OperatorOverflowError("matrix exponential overflowed")
    return ExteriorOperator(op.n, out)


def exp_batch(stack: np.ndarray) -> np.ndarray:
    """expm over a stack of (2^n, 2^n) matrices with the same overflow guard."""
    stack = np.asarray(stack, dtype=float)
    norms = np.abs(stack).sum(axis=-2).max(axis=-1)
    if np.any(norms > EXP_NORM_LIMIT):
        raise OperatorOverflowError(f"operator 1-norm {float(norms.max()):.3g} too large to exponentiate")
    out = scipy.linalg.expm(stack)
    if not np.all(np.isfinite(out)):
        raise OperatorOverflowError("matrix exponential overflowed")
    return out


def supertrace_batch(stack: np.ndarray, n: int) -> np.ndarray:
    return np.einsum("...aa,a->...", stack, grading(n).astype(float))


def weitzenbock_term(n: int, riemann: np.ndarray) -> ExteriorOperator:
    """Curvature term of (d+δ)² = -Δ₀ + R̃ for a curvature tensor R_ijkl at a point.

    R̃ = 1/8 Σ R_ijkl E⁻_i E⁻_j E⁺_k E⁺_l + 1/4 Σ R_ijij. Flat tori pass the zero
    tensor and get the zero operator.
    """
    n = check_dim(n)
    r = np.asarray(riemann, dtype=float)
    if r.shape != (n,) * 4:
        raise DimensionError(f"curvature tensor must have shape {(n,) * 4}, got {r.shape}")
    size = 2**n
    em = [e_minus(n, i).matrix for i in range(1, n + 1)]
    ep = [e_plus(n, i).matrix for i in range(1, n + 1)]
    out = np.zeros((size, size))
    for i, j, k, l in np.argwhere(r != 0):
        out += r[i, j, k, l] * (em[i] @ em[j] @ ep[k] @ ep[l])
    out /= 8.0
    out += 0.25 * np.einsum("ijij->", r) * np.eye(size)
    return ExteriorOperator(n, out)


def exp_supertrace_mp(v: np.ndarray, s: float, dps: int = 40) -> float:
    """str exp(sΣv_jk E⁺_jE⁻_k) evaluated in mpmath precision.

    The leading term is (2s)^n det v, far below double roundoff of the
    identity part once s is small.
    """
    q = clifford_quadratic_batch(np.asarray(v, dtype=float))
    g = grading(q.shape[-1].bit_length() - 1)
    with mpmath.workdps(dps):
        e = mpmath.expm(mpmath.matrix(q.tolist()) * mpmath.mpf(s))
        val = mpmath.fsum(int(g[i]) * e[i, i] for i in range(len(g)))
        return float(val)
