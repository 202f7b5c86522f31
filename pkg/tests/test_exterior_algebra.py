from __future__ import annotations

import math
from itertools import product as cartesian

import numpy as np
import pytest

from hopf_heat.exterior_algebra import (
    DimensionError,
    ExteriorOperator,
    OperatorOverflowError,
    annihilation,
    anticommutator,
    basis,
    clifford_quadratic,
    creation,
    e_minus,
    e_plus,
    exp_operator,
    exp_supertrace_mp,
    grading,
    product,
    supercommutator,
    supertrace,
    weitzenbock_term,
)


class TestBasis:
    def test_order_is_by_degree_then_lexicographic(self):
        assert [b.index_set for b in basis(2)] == [(), (1,), (2,), (1, 2)]
        assert len(basis(4)) == 16

    def test_grading(self):
        assert grading(2).tolist() == [1, -1, -1, 1]

    @pytest.mark.parametrize("n", [0, 9, 2.5])
    def test_bad_dimension(self, n):
        with pytest.raises(DimensionError):
            basis(n)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            creation(2, 3)


class TestCreationSigns:
    def test_wedge_on_the_right(self):
        # ω2 ∧ ω1 = -ω1∧ω2, ω1 ∧ ω2 = +ω1∧ω2
        assert creation(2, 1).matrix[3, 2] == -1
        assert creation(2, 2).matrix[3, 1] == 1

    def test_annihilation_is_transpose(self):
        assert np.array_equal(annihilation(3, 2).matrix, creation(3, 2).matrix.T)


class TestAnticommutation:
    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_exact_relations(self, n):
        ident = ExteriorOperator.identity(n)
        zero = ExteriorOperator.zero(n)
        for i, j in cartesian(range(1, n + 1), repeat=2):
            delta = ident if i == j else zero
            assert anticommutator(creation(n, i), annihilation(n, j)).equals(delta)
            assert anticommutator(annihilation(n, i), annihilation(n, j)).equals(zero)
            assert anticommutator(e_plus(n, i), e_plus(n, j)).equals(delta * 2)
            assert anticommutator(e_minus(n, i), e_minus(n, j)).equals(delta * -2)
            assert anticommutator(e_plus(n, i), e_minus(n, j)).equals(zero)


class TestSupertrace:
    @pytest.mark.parametrize("n", [1, 2, 3, 4])
    def test_top_product(self, n):
        top = product(*[op for j in range(1, n + 1) for op in (e_plus(n, j), e_minus(n, j))])
        assert supertrace(top) == 2**n

    def test_short_products_vanish(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 5))
            k = int(rng.integers(1, 2 * n))
            ops = [(e_plus if rng.random() < 0.5 else e_minus)(n, int(rng.integers(1, n + 1))) for _ in range(k)]
            assert supertrace(product(*ops)) == 0

    def test_supercommutator_of_even_operators(self, rng):
        for _ in range(10):
            a = clifford_quadratic(rng.normal(size=(3, 3)))
            b = clifford_quadratic(rng.normal(size=(3, 3))) @ clifford_quadratic(rng.normal(size=(3, 3)))
            assert abs(supertrace(supercommutator(a, b))) < 1e-10

    def test_supercommutator_of_odd_operators(self):
        a, b = e_plus(3, 1), e_minus(3, 2) @ e_plus(3, 3) @ e_minus(3, 1)
        assert supertrace(supercommutator(a, b)) == 0

    def test_integer_operators_give_integers(self):
        assert isinstance(supertrace(ExteriorOperator.identity(3)), int)


class TestExponential:
    def test_diagonal_quadratic_is_product_of_sinh(self):
        s = 0.3
        v = np.diag([1.0, 2.0])
        val = supertrace(exp_operator(clifford_quadratic(s * v)))
        assert val == pytest.approx(4.0 * math.sinh(s) * math.sinh(2.0 * s), rel=1e-12)

    def test_mp_supertrace_leading_order(self):
        s = 1e-4
        val = exp_supertrace_mp(np.diag([1.0, 2.0]), s)
        assert val == pytest.approx(4.0 * math.sinh(s) * math.sinh(2.0 * s), rel=1e-12)
        assert abs(val / ((2.0 * s) ** 2 * 2.0) - 1.0) < 1e-6

    def test_mp_matches_float_at_moderate_s(self, rng):
        v = rng.normal(size=(3, 3))
        ref = supertrace(exp_operator(clifford_quadratic(0.5 * v)))
        assert exp_supertrace_mp(v, 0.5) == pytest.approx(ref, rel=1e-9, abs=1e-11)

    def test_overflow_guard(self):
        with pytest.raises(OperatorOverflowError):
            exp_operator(clifford_quadratic(1000.0 * np.eye(2)))


class TestWeitzenbock:
    def test_flat_tensor_gives_zero(self):
        assert np.array_equal(weitzenbock_term(2, np.zeros((2, 2, 2, 2))).matrix, np.zeros((4, 4)))

    def test_shape_checked(self):
        with pytest.raises(DimensionError):
            weitzenbock_term(2, np.zeros((3, 3, 3, 3)))
