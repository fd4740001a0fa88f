"""Flow matrix elements: F/G systems, eta flows, scans and witnesses."""

import math

import numpy as np
import pytest

import uhfflow.dense as dense
import uhfflow.fock as fock
import uhfflow.lindblad as lb
from uhfflow.algebra import LocalOperator, gns_inner, random_local
from uhfflow.errors import SizeGuardError, WindowError


@pytest.fixture
def maxmix():
    return dense.StateSpec(np.eye(2) / 2)


@pytest.fixture
def zf():
    return fock.TestFunction.zero()


@pytest.fixture
def driven_pair():
    f = fock.TestFunction.build(1.0, 4, {((0,), 0): [0.9, 0.4, 0.7, 0.2],
                                         ((0,), 2): [0.3, 0.1, 0.5, 0.6]})
    g = fock.TestFunction.build(1.0, 4, {((0,), 1): [0.2, 0.8, 0.5, 0.3],
                                         ((0,), 0): [0.6, 0.2, 0.9, 0.1]})
    return f, g


@pytest.fixture
def eta_sys(p2, maxmix):
    L = lb.Lindbladian.partial_state(p2, maxmix)
    return fock.build_generator_system(L, [(0,)])


GRID = np.linspace(0.0, 2.0, 9)


class TestTestFunctions:
    def test_step_function_basics(self):
        s = fock.StepFunction(1.0, (1.0, 2.0))
        assert s.value_at(0.1) == 1.0
        assert s.value_at(0.6) == 2.0
        assert s.value_at(1.0) == 0.0  # zero beyond t_max
        assert s.l2_sq() == pytest.approx(2.5)
        with pytest.raises(ValueError):
            fock.StepFunction(0.0, (1.0,))

    def test_gamma(self):
        f = fock.TestFunction.build(1.0, 4, {((0,), 0): [1, 1, 1, 1]})
        assert f.gamma(1.0) == pytest.approx(2.0)  # 1 + ||f||^2 = 2 on [0,1]
        assert f.gamma(0.5) == pytest.approx(1.0)
        assert f.gamma(3.0) == pytest.approx(4.0)  # zero beyond t_max

    def test_inner_and_exp_inner(self, zf):
        assert fock.exp_inner(zf, zf) == 1.0
        f = fock.TestFunction.build(1.0, 4, {((0,), 0): [1, 1, 1, 1]})
        assert abs(fock.exp_inner(f, f) - math.e) < 1e-12
        g = fock.TestFunction.build(1.0, 4, {((1,), 0): [1, 1, 1, 1]})
        assert fock.exp_inner(f, g) == 1.0  # disjoint modes

    def test_grid_mismatch(self):
        f = fock.TestFunction.build(1.0, 4, {((0,), 0): [1, 1, 1, 1]})
        g = fock.TestFunction.build(2.0, 4, {((0,), 0): [1, 1, 1, 1]})
        with pytest.raises(ValueError):
            f.inner(g)

    def test_shift(self):
        f = fock.TestFunction.build(1.0, 2, {((2,), 0): [1.0, 0.5]})
        shifted = f.shifted((1,))
        assert shifted.mode_keys() == (((1,), 0),)
        assert shifted.mode_values(((1,), 0)) == (1.0 + 0j, 0.5 + 0j)

    def test_exponential_vector_norm(self, p2, zf):
        f = fock.TestFunction.build(1.0, 4, {((0,), 0): [1, 1, 1, 1]})
        spec = fock.ExponentialVectorSpec(LocalOperator.identity(p2), f)
        assert spec.norm() == pytest.approx(math.exp(0.5))


class TestGeneratorSystem:
    def test_partial_site_closes(self, eta_sys):
        assert eta_sys.dim == 4
        assert eta_sys.leak_free()
        assert [m for (_k, m) in eta_sys.noise] == [0, 1, 2, 3]

    def test_translation_noise_indices(self, p2, pauli):
        L = lb.Lindbladian.single_kraus(pauli[0], unital=True)
        sys_ = fock.build_generator_system(L, [(-1,), (0,), (1,)])
        assert [k for (k, _m) in sys_.noise] == [(-1,), (0,), (1,)]
        assert sys_.leak_free()

    def test_lhat_annihilates_identity(self, eta_sys):
        from uhfflow.algebra import WeylLabel

        col = eta_sys.index[WeylLabel.identity()]
        assert np.abs(eta_sys.lhat_t.toarray()[col]).max() < 1e-14

    def test_dimension_guard(self, p2, maxmix):
        L = lb.Lindbladian.partial_state(p2, maxmix)
        with pytest.raises(SizeGuardError):
            fock.build_generator_system(L, [(i,) for i in range(7)])

    def test_two_site_word_leaks(self, p2, pauli):
        r2 = pauli[0] * pauli[0].translate((1,))
        L = lb.Lindbladian.single_kraus(r2, unital=True)
        sys_ = fock.build_generator_system(L, [(0,), (1,)])
        assert not sys_.leak_free()


class TestFlowElement:
    def test_initial_condition(self, eta_sys, p2, rng, driven_pair):
        f, g = driven_pair
        u = random_local(p2, rng, [(0,)], include_identity=True)
        v = random_local(p2, rng, [(0,)])
        traj = fock.flow_element(eta_sys, LocalOperator.identity(p2), u, f, v, g, [0.0])
        for lab in eta_sys.basis:
            expected = gns_inner(u, LocalOperator.weyl(p2, lab) * v) * fock.exp_inner(f, g)
            assert abs(traj.of_label(lab)[0] - expected) < 1e-13

    def test_vacuum_closed_form(self, eta_sys, p2, pauli, zf):
        sx, _, _, one = pauli
        traj = fock.flow_element(eta_sys, sx, sx, zf, one, zf, GRID)
        assert np.abs(traj.of_operator(sx) - np.exp(-GRID)).max() < 1e-12

    def test_identity_constant(self, eta_sys, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, sz, _, one = pauli
        traj = fock.flow_element(eta_sys, one, sx, f, sz, g, GRID)
        vals = traj.of_operator(one)
        assert np.abs(vals - vals[0]).max() < 1e-10

    def test_support_outside_window(self, eta_sys, p2):
        with pytest.raises(WindowError):
            fock.flow_element(eta_sys, LocalOperator.site_word(p2, (3,), 1, 0),
                              LocalOperator.identity(p2), fock.TestFunction.zero(),
                              LocalOperator.identity(p2), fock.TestFunction.zero(), [0.0])

    def test_vacuum_reduction_translation(self, p2, pauli, zf, rng):
        sx, sz, _, one = pauli
        L = lb.Lindbladian.single_kraus(sx, unital=True)
        sys_ = fock.build_generator_system(L, [(0,)])
        u = random_local(p2, rng, [(0,)], include_identity=True)
        v = random_local(p2, rng, [(0,)])
        traj = fock.flow_element(sys_, sz, u, zf, v, zf, GRID)
        sop = dense.superoperator(L, dense.window(p2, [(0,)]))
        expected = np.array([
            gns_inner(u, dense.expm_evolve(sop, t, sz) * v) for t in GRID
        ])
        assert np.abs(traj.of_operator(sz) - expected).max() < 1e-8

    def test_adjoint_symmetry(self, eta_sys, p2, rng, driven_pair):
        f, g = driven_pair
        u = random_local(p2, rng, [(0,)])
        v = random_local(p2, rng, [(0,)])
        x = random_local(p2, rng, [(0,)], include_identity=True)
        fwd = fock.flow_element(eta_sys, x, u, f, v, g, GRID)
        bwd = fock.flow_element(eta_sys, x.adjoint(), v, g, u, f, GRID)
        assert np.abs(bwd.of_operator(x.adjoint())
                      - np.conj(fwd.of_operator(x))).max() < 1e-9

    def test_rk4_matches_expm(self, eta_sys, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, sz, _, one = pauli
        a = fock.flow_element(eta_sys, sx, sx, f, sz, g, GRID, solver="expm")
        b = fock.flow_element(eta_sys, sx, sx, f, sz, g, GRID, solver="rk4", substeps=32)
        assert np.abs(a.of_operator(sx) - b.of_operator(sx)).max() < 1e-8


class TestPicard:
    def test_error_bound_values(self, p2, pauli, zf):
        sz = pauli[1]
        L = lb.Lindbladian.single_kraus(pauli[0], unital=True)
        # f = 0, t0 = 1: c_f = 2e, so the n = 1 bound is 3 * sqrt(2e) * 2 * (2 theta c_x)
        got = fock.picard_error_bound(sz, zf, 1.0, 1, L)
        expected = 3.0 * math.sqrt(2.0 * math.e) * 2.0 * 4.0
        assert got == pytest.approx(expected, rel=1e-12)

    def test_bound_eventually_decreasing(self, p2, pauli, zf):
        # Ratio bound(n+1)/bound(n) = base / sqrt(n+1): once n passes
        # base^2 the factorial wins; t0 chosen so that happens within 30.
        L = lb.Lindbladian.single_kraus(pauli[0], unital=True)
        vals = [fock.picard_error_bound(pauli[1], zf, 0.02, n, L) for n in range(1, 31)]
        drops = [vals[i + 1] < vals[i] for i in range(len(vals) - 1)]
        assert all(drops[-5:])  # sqrt(n!) wins
        # and the tail bound past the turnover is finite and small
        assert fock.picard_tail_bound(pauli[1], zf, 0.02, 30, L) < vals[-1]

    def test_identity_collapses(self, p2, pauli, zf):
        L = lb.Lindbladian.single_kraus(pauli[0], unital=True)
        assert fock.picard_error_bound(LocalOperator.identity(p2), zf, 1.0, 3, L) == 0.0

    def test_certified_agreement_with_ode(self, p2, pauli, zf):
        sx, sz, _, one = pauli
        L = lb.Lindbladian.single_kraus(sx, unital=True)
        sys_ = fock.build_generator_system(L, [(0,)])
        grid = np.linspace(0.0, 0.25, 5)
        depth = fock.smallest_certified_depth(sz, zf, 0.25, L, 1e-8)
        assert fock.picard_tail_bound(sz, zf, 0.25, depth, L) < 1e-8
        a = fock.flow_element(sys_, sz, one, zf, sz, zf, grid)
        b = fock.flow_element(sys_, sz, one, zf, sz, zf, grid,
                              method="picard", picard_depth=depth)
        assert np.abs(a.of_operator(sz) - b.of_operator(sz)).max() < 1e-7

    def test_driven_picard(self, p2, pauli):
        sx, sz, _, one = pauli
        L = lb.Lindbladian.single_kraus(sx, unital=True)
        sys_ = fock.build_generator_system(L, [(0,)])
        f = fock.TestFunction.build(0.25, 2, {((0,), 0): [0.5, 0.25]})
        grid = np.linspace(0.0, 0.25, 5)
        a = fock.flow_element(sys_, sz, one, f, sz, f, grid)
        b = fock.flow_element(sys_, sz, one, f, sz, f, grid, method="picard")
        assert np.abs(a.of_operator(sz) - b.of_operator(sz)).max() < 1e-7


class TestPairSystem:
    def test_initial_product_identity(self, eta_sys, p2, rng, driven_pair):
        f, g = driven_pair
        u = random_local(p2, rng, [(0,)], include_identity=True)
        v = random_local(p2, rng, [(0,)])
        gtraj = fock.pair_element(eta_sys, None, u, f, v, g, [0.0])
        ftraj = fock.flow_element(eta_sys, LocalOperator.identity(p2), u, f, v, g, [0.0])
        for a in eta_sys.basis:
            for b in eta_sys.basis:
                xa, yb = LocalOperator.weyl(p2, a), LocalOperator.weyl(p2, b)
                assert abs(gtraj.of_pair(xa, yb)[0]
                           - ftraj.of_operator(xa * yb)[0]) < 1e-12

    def test_identity_slot_matches_f(self, eta_sys, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, sz, _, one = pauli
        gtraj = fock.pair_element(eta_sys, None, sx, f, sz, g, GRID)
        assert gtraj.consistent
        assert gtraj.consistency_violation < 1e-9

    def test_vacuum_pair_example(self, eta_sys, p2, pauli, zf):
        sx, _, _, one = pauli
        gtraj = fock.pair_element(eta_sys, [(sx, sx)], one, zf, one, zf, GRID)
        vals = gtraj.of_pair(sx, sx)
        assert np.abs(vals - 1.0).max() < 1e-10


class TestHomomorphism:
    def test_single_site_all_pairs(self, eta_sys, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, sz, _, one = pauli
        worst = 0.0
        for a in eta_sys.basis:
            for b in eta_sys.basis:
                rep = fock.homomorphism_defect(
                    eta_sys, LocalOperator.weyl(p2, a), LocalOperator.weyl(p2, b),
                    sx + 0.3 * sz, f, one, g, GRID)
                worst = max(worst, rep.defect)
        assert worst < 1e-8

    def test_unit_second_slot(self, eta_sys, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, _, _, one = pauli
        rep = fock.homomorphism_defect(eta_sys, sx, one, sx, f, one, g, GRID)
        assert rep.defect < 1e-9

    def test_window_ladder_decreases(self, p2, pauli):
        sx, sz, _, one = pauli
        r = sx * LocalOperator.site_word(p2, (1,), 1, 1)  # X (x) XZ word
        L = lb.Lindbladian.single_kraus(r)
        f = fock.TestFunction.build(0.25, 4, {((0,), 0): [1.0, 0.7, 0.4, 0.1],
                                              ((1,), 0): [0.3, 0.6, 0.2, 0.5]})
        g = fock.TestFunction.build(0.25, 4, {((0,), 0): [0.5, 0.9, 0.2, 0.6],
                                              ((-1,), 0): [0.8, 0.1, 0.3, 0.4]})
        grid = np.linspace(0.0, 0.25, 6)
        defects = []
        for w in ([(0,), (1,)], [(-1,), (0,), (1,)], [(-1,), (0,), (1,), (2,)]):
            sys_ = fock.build_generator_system(L, w)
            rep = fock.homomorphism_defect(sys_, sz, sz, one, f, one, g, grid)
            assert rep.defect <= rep.error_estimate
            defects.append(rep.defect)
        assert defects[0] > defects[1] > defects[2]


class TestContraction:
    def test_identity_equality(self, eta_sys, p2, zf, pauli):
        one = pauli[3]
        rep = fock.contraction_check(eta_sys, one, [(1.0, one, zf)], 1.0)
        assert rep.lhs == pytest.approx(rep.rhs, abs=1e-12)

    def test_unitary_word(self, eta_sys, p2, pauli, zf):
        sx, _, _, one = pauli
        rep = fock.contraction_check(eta_sys, sx, [(1.0, one, zf), (0.5j, sx, zf)], 1.0)
        assert rep.lhs == pytest.approx(rep.rhs, abs=1e-10)

    def test_mixed_observable(self, eta_sys, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, sz, _, one = pauli
        rep = fock.contraction_check(
            eta_sys, sx + sz, [(1.0, one, f), (0.5, sx, g)], 1.0)
        assert rep.lhs <= rep.rhs + rep.error + 1e-9
        assert rep.lhs >= -(rep.error + 1e-9)

    def test_family_guard(self, eta_sys, p2, zf, pauli):
        fam = [(1.0, pauli[3], zf)] * 9
        with pytest.raises(SizeGuardError):
            fock.contraction_check(eta_sys, pauli[0], fam, 1.0)


class TestCovariance:
    def test_zero_shift(self, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, sz, _, _ = pauli
        L = lb.Lindbladian.single_kraus(sx, unital=True)
        rep = fock.covariance_check(L, [(-1,), (0,), (1,)], sz, sz, f, sx, g, (0,), GRID)
        assert rep.deviation < 1e-12

    def test_vacuum_case(self, p2, pauli, zf, rng):
        sx, sz, _, _ = pauli
        u = random_local(p2, rng, [(0,)])
        v = random_local(p2, rng, [(0,)])
        L = lb.Lindbladian.single_kraus(sx, unital=True)
        rep = fock.covariance_check(L, [(-1,), (0,), (1,)], sz, u, zf, v, zf, (1,), GRID)
        assert rep.deviation < 1e-9

    def test_driven_within_estimate(self, p2, pauli):
        sx, sz, _, _ = pauli
        r = sx * LocalOperator.site_word(p2, (1,), 1, 0)
        L = lb.Lindbladian.single_kraus(r, unital=True)
        f = fock.TestFunction.build(0.5, 2, {((0,), 0): [0.8, 0.3]})
        g = fock.TestFunction.build(0.5, 2, {((1,), 0): [0.4, 0.6]})
        grid = np.linspace(0.0, 0.5, 5)
        rep = fock.covariance_check(L, [(0,), (1,)], sz, sz, f, sx, g, (1,), grid)
        assert rep.deviation <= max(2 * rep.error_estimate, 1e-9)


class TestEtaFlows:
    def test_site_flow_closed_form(self, p2, maxmix, pauli, zf):
        sx, _, _, one = pauli
        traj = fock.eta_site_flow(maxmix, (0,), sx, sx, zf, one, zf, GRID)
        assert np.abs(traj.of_operator(sx) - np.exp(-GRID)).max() < 1e-12

    def test_site_flow_support_check(self, p2, maxmix, pauli, zf):
        with pytest.raises(WindowError):
            fock.eta_site_flow(maxmix, (1,), pauli[0], pauli[3], zf, pauli[3], zf, GRID)

    def test_product_matches_direct_window(self, p2, maxmix, rng):
        sx0 = LocalOperator.site_word(p2, (0,), 1, 0)
        sx1 = LocalOperator.site_word(p2, (1,), 1, 0)
        f = fock.TestFunction.build(1.0, 4, {((0,), 0): [0.9, 0.4, 0.7, 0.2],
                                             ((1,), 2): [0.3, 0.1, 0.5, 0.6]})
        g = fock.TestFunction.build(1.0, 4, {((0,), 1): [0.2, 0.8, 0.5, 0.3],
                                             ((1,), 2): [0.6, 0.2, 0.9, 0.1]})
        u = sx0 * LocalOperator.site_word(p2, (1,), 0, 1)
        v = LocalOperator.site_word(p2, (0,), 0, 1)
        x = sx0 * sx1
        L = lb.Lindbladian.partial_state(p2, maxmix)
        sys2 = fock.build_generator_system(L, [(0,), (1,)])
        direct = fock.flow_element(sys2, x, u, f, v, g, GRID).of_operator(x)
        prod = fock.eta_product_flow(maxmix, x, u, f, v, g, GRID,
                                     sites=[(0,), (1,)]).F[:, 0]
        assert np.abs(direct - prod).max() < 1e-10

    def test_product_order_invariance(self, p2, maxmix, pauli, zf):
        sx = pauli[0]
        x = sx * sx.translate((1,))
        a = fock.eta_product_flow(maxmix, x, x, zf, pauli[3], zf, GRID,
                                  sites=[(0,), (1,)]).F[:, 0]
        b = fock.eta_product_flow(maxmix, x, x, zf, pauli[3], zf, GRID,
                                  sites=[(1,), (0,)]).F[:, 0]
        assert np.abs(a - b).max() == 0.0

    def test_identity_constant(self, p2, maxmix, pauli, driven_pair):
        f, g = driven_pair
        traj = fock.eta_product_flow(maxmix, pauli[3], pauli[0], f, pauli[1], g, GRID)
        vals = traj.F[:, 0]
        assert np.abs(vals - vals[0]).max() < 1e-10


class TestErgodicityScan:
    def test_traceless_silent_case(self, p2, maxmix, pauli, zf):
        # u = v = 1 and tr(sx) = 0: the element vanishes identically.
        scan = fock.eta_ergodicity_scan(maxmix, pauli[0], pauli[3], zf, pauli[3], zf, GRID)
        assert np.abs(scan.values).max() < 1e-14

    def test_vacuum_rate(self, p2, maxmix, pauli, zf):
        sx, _, _, one = pauli
        scan = fock.eta_ergodicity_scan(maxmix, sx, sx, zf, one, zf,
                                        np.linspace(0.0, 8.0, 33))
        assert scan.rate == pytest.approx(1.0, abs=1e-3)

    def test_driven_scan(self, p2, maxmix, pauli):
        sx, _, _, one = pauli
        f = fock.TestFunction.build(1.0, 4, {((0,), 0): [1.0, 0.5, 0.25, 0.1]})
        g = fock.TestFunction.build(1.0, 4, {((0,), 0): [0.5, 0.5, 0.5, 0.5]})
        scan = fock.eta_ergodicity_scan(maxmix, sx, sx, f, one, g,
                                        np.linspace(0.0, 15.0, 61))
        assert scan.rate == pytest.approx(1.0, abs=1e-2)
        assert scan.values[-1] < 1e-6

    def test_unit_observable(self, p2, maxmix, pauli, driven_pair):
        f, g = driven_pair
        scan = fock.eta_ergodicity_scan(maxmix, pauli[3], pauli[0], f, pauli[1], g, GRID)
        assert np.abs(scan.values).max() < 1e-9


class TestHpWitness:
    def test_d1_counts(self, p2, pauli):
        sums = fock.hp_divergence_witness(pauli[0], pauli[3], 10)
        assert sums == [2 * k + 1 for k in range(1, 11)]

    def test_d2_counts(self, p2d2):
        r = LocalOperator.site_word(p2d2, (0, 0), 1, 0)
        one = LocalOperator.identity(p2d2)
        sums = fock.hp_divergence_witness(r, one, 4)
        assert sums == [(2 * k + 1) ** 2 for k in range(1, 5)]

    def test_zero_kraus(self, p2, pauli):
        sums = fock.hp_divergence_witness(LocalOperator.zero(p2), pauli[3], 3)
        assert sums == [0.0, 0.0, 0.0]


class TestUniquenessSurrogate:
    def test_two_ode_runs_agree(self, eta_sys, p2, pauli, driven_pair):
        f, g = driven_pair
        sx, sz, _, one = pauli
        a = fock.flow_element(eta_sys, sx, sx, f, sz, g, GRID, solver="rk4", substeps=16)
        b = fock.flow_element(eta_sys, sx, sx, f, sz, g, GRID, solver="rk4", substeps=32)
        assert np.abs(a.of_operator(sx) - b.of_operator(sx)).max() < 1e-8
