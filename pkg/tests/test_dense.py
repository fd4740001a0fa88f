"""Dense realization, superoperators, Choi positivity, Kraus families."""

import numpy as np
import pytest

import uhfflow.dense as dense
from uhfflow.algebra import AlgebraParams, LocalOperator, random_local
from uhfflow.errors import SizeGuardError, StateError, WindowError
from uhfflow.lindblad import Lindbladian


SX = np.array([[0, 1], [1, 0]], dtype=complex)
SZ = np.diag([1.0, -1.0]).astype(complex)


class TestClockShift:
    def test_pauli_at_two(self):
        U, V = dense.clock_shift(2)
        assert np.abs(U - SX).max() == 0.0
        assert np.abs(V - SZ).max() == 0.0

    @pytest.mark.parametrize("N", [2, 3, 4, 5])
    def test_relations(self, N):
        U, V = dense.clock_shift(N)
        w = np.exp(2j * np.pi / N)
        eye = np.eye(N)
        assert np.abs(np.linalg.matrix_power(U, N) - eye).max() < 1e-13
        assert np.abs(np.linalg.matrix_power(V, N) - eye).max() < 1e-13
        assert np.abs(U @ V - w * V @ U).max() < 1e-13
        assert np.abs(U @ U.conj().T - eye).max() < 1e-14

    def test_rejects_small_n(self):
        with pytest.raises(ValueError):
            dense.clock_shift(1)


class TestRealize:
    def test_word_matrix(self, p2):
        x = LocalOperator.site_word(p2, (0,), 1, 1)
        got = dense.realize(x, dense.window(p2, [(0,)])).matrix
        assert np.abs(got - SX @ SZ).max() < 1e-15

    def test_identity(self, p2):
        win = dense.window(p2, [(0,), (1,)])
        got = dense.realize(LocalOperator.identity(p2), win).matrix
        assert np.abs(got - np.eye(4)).max() == 0.0

    def test_homomorphism_random(self, p2, rng):
        win = dense.window(p2, [(0,), (1,), (2,)])
        for _ in range(20):
            x = random_local(p2, rng, win.sites)
            y = random_local(p2, rng, win.sites)
            lhs = dense.realize(x * y, win).matrix
            rhs = dense.realize(x, win).matrix @ dense.realize(y, win).matrix
            assert np.abs(lhs - rhs).max() < 1e-12

    def test_window_violation(self, p2):
        x = LocalOperator.site_word(p2, (5,), 1, 0)
        with pytest.raises(WindowError):
            dense.realize(x, dense.window(p2, [(0,)]))

    def test_translate_consistency(self, p2, rng):
        x = random_local(p2, rng, [(0,), (1,)])
        win = dense.window(p2, [(0,), (1,)])
        shifted = dense.window(p2, [(3,), (4,)])
        a = dense.realize(x, win).matrix
        b = dense.realize(x.translate((3,)), shifted).matrix
        assert np.abs(a - b).max() == 0.0

    def test_trace_consistency(self, p2, rng):
        win = dense.window(p2, [(0,), (1,)])
        x = random_local(p2, rng, win.sites, include_identity=True)
        mat = dense.realize(x, win).matrix
        assert abs(np.trace(mat) / 4 - x.trace()) < 1e-13


class TestOperatorNorm:
    def test_unitary_words(self, p2, rng):
        from uhfflow.algebra import random_label

        for _ in range(10):
            g = random_label(p2, rng, [(0,), (1,)])
            assert abs(dense.operator_norm(LocalOperator.weyl(p2, g)) - 1.0) < 1e-12

    def test_sx_plus_sz(self, pauli):
        sx, sz, _, _ = pauli
        assert abs(dense.operator_norm(sx + sz) - np.sqrt(2)) < 1e-12

    def test_scalar(self, p2):
        assert dense.operator_norm(LocalOperator.identity(p2) * 2.0) == 2.0
        assert dense.operator_norm(LocalOperator.zero(p2)) == 0.0


@pytest.fixture
def partial_maxmix(p2):
    return Lindbladian.partial_state(p2, dense.StateSpec(np.eye(2) / 2))


class TestSuperoperator:
    def test_partial_eigenvalues(self, p2, partial_maxmix):
        sop = dense.superoperator(partial_maxmix, dense.window(p2, [(0,)]))
        eigs = sorted(np.linalg.eigvals(sop.matrix).real)
        assert np.abs(np.array(eigs) - np.array([-1, -1, -1, 0])).max() < 1e-12

    def test_annihilates_identity(self, p2, partial_maxmix):
        sop = dense.superoperator(partial_maxmix, dense.window(p2, [(0,), (1,)]))
        vec = dense.coefficient_vector(LocalOperator.identity(p2), sop.index)
        assert np.abs(sop.matrix @ vec).max() < 1e-14

    def test_matches_symbolic_interior(self, p2, rng):
        sx = LocalOperator.site_word(p2, (0,), 1, 0)
        L = Lindbladian.single_kraus(sx, unital=True)
        win = dense.window(p2, [(-1,), (0,), (1,)])
        sop = dense.superoperator(L, win, "interior")
        for _ in range(10):
            x = random_local(p2, rng, win.sites)
            vec = dense.coefficient_vector(x, sop.index)
            image = sop.matrix @ vec
            sym = L.windowed_apply(x, win.sites, "interior")
            sym_vec = dense.coefficient_vector(sym, sop.index)
            assert np.abs(image - sym_vec).max() < 1e-12

    def test_dim_guard(self, p2, partial_maxmix):
        big = dense.window(p2, [(i,) for i in range(8)])
        with pytest.raises(SizeGuardError):
            dense.superoperator(partial_maxmix, big)


class TestExpmEvolve:
    def test_time_zero(self, p2, partial_maxmix, rng):
        win = dense.window(p2, [(0,), (1,)])
        sop = dense.superoperator(partial_maxmix, win)
        x = random_local(p2, rng, win.sites, include_identity=True)
        assert dense.expm_evolve(sop, 0.0, x).sup_diff(x) < 1e-14

    def test_partial_closed_form(self, p2, partial_maxmix, pauli):
        sx = pauli[0]
        sop = dense.superoperator(partial_maxmix, dense.window(p2, [(0,)]))
        got = dense.expm_evolve(sop, 0.7, sx)
        assert got.sup_diff(sx * np.exp(-0.7)) < 1e-13

    def test_semigroup_law(self, p2, partial_maxmix, rng):
        win = dense.window(p2, [(0,), (1,)])
        sop = dense.superoperator(partial_maxmix, win)
        x = random_local(p2, rng, win.sites)
        once = dense.expm_evolve(sop, 0.9, x)
        twice = dense.expm_evolve(sop, 0.5, dense.expm_evolve(sop, 0.4, x))
        assert once.sup_diff(twice) < 1e-10

    def test_negative_time(self, p2, partial_maxmix, pauli):
        sop = dense.superoperator(partial_maxmix, dense.window(p2, [(0,)]))
        with pytest.raises(ValueError):
            dense.expm_evolve(sop, -0.1, pauli[0])


class TestChoi:
    @pytest.mark.parametrize("t", [0.1, 0.5, 1.0])
    def test_positive_semidefinite(self, p2, partial_maxmix, t):
        sop = dense.superoperator(partial_maxmix, dense.window(p2, [(0,), (1,)]))
        choi = dense.choi_matrix(sop, t)
        assert np.abs(choi - choi.conj().T).max() < 1e-10
        assert np.linalg.eigvalsh(choi).min() > -1e-9

    def test_translation_interior_window(self, p2, t=0.5):
        sx = LocalOperator.site_word(p2, (0,), 1, 0)
        L = Lindbladian.single_kraus(sx, unital=True)
        sop = dense.superoperator(L, dense.window(p2, [(0,), (1,)]), "interior")
        assert np.linalg.eigvalsh(dense.choi_matrix(sop, t)).min() > -1e-9


class TestStateKraus:
    def test_maximally_mixed(self):
        state = dense.StateSpec(np.eye(2) / 2)
        ops = dense.state_kraus(state)
        assert len(ops) == 4
        total = sum(K.conj().T @ SZ @ K for K in ops)
        assert np.abs(total).max() < 1e-12  # Tr(rho sz) = 0

    def test_pure_state(self):
        state = dense.StateSpec(np.diag([1.0, 0.0]))
        ops = dense.state_kraus(state)
        assert len(ops) == 2
        got = {tuple(np.flatnonzero(np.abs(K) > 1e-12)) for K in ops}
        x = np.array([[0.3, 0.4], [0.4, 0.7]], dtype=complex)
        total = sum(K.conj().T @ x @ K for K in ops)
        assert np.abs(total - x[0, 0] * np.eye(2)).max() < 1e-12

    def test_random_state_normalization(self, rng):
        for _ in range(5):
            A = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
            rho = A @ A.conj().T
            rho /= np.trace(rho).real
            ops = dense.state_kraus(dense.StateSpec(rho))
            total = sum(K.conj().T @ K for K in ops)
            assert np.abs(total - np.eye(3)).max() < 1e-12

    def test_state_validation(self):
        with pytest.raises(StateError):
            dense.StateSpec(np.array([[1.0, 0.5], [0.0, 0.0]]))  # not Hermitian
        with pytest.raises(StateError):
            dense.StateSpec(np.diag([1.5, -0.5]))  # negative eigenvalue
        with pytest.raises(StateError):
            dense.StateSpec(np.diag([0.9, 0.9]))  # trace != 1


class TestMatrixToLocal:
    def test_round_trip(self, p2, rng):
        mat = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        op = dense.matrix_to_local(p2, (0,), mat)
        back = dense.realize(op, dense.window(p2, [(0,)])).matrix
        assert np.abs(back - mat).max() < 1e-12

    def test_n3(self, p3, rng):
        mat = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        op = dense.matrix_to_local(p3, (0,), mat)
        back = dense.realize(op, dense.window(p3, [(0,)])).matrix
        assert np.abs(back - mat).max() < 1e-12
