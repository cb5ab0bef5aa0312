import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfe.estimator import (
    EmptyGroupError,
    GroupAssignment,
    GroupTimeProfiles,
    StartingValues,
    assignment_step,
    dense_parameter_step,
    g_sweep,
    gfe_fit,
    gfe_fit_single,
    parameter_step,
    recompute_objective,
    ssr_matrix,
    unit_group_ssr,
    unmodified_parameter_step,
)
from gfe.panel import PanelData, within_transform
from gfe.regression import fit_2wfe, fit_time_effects
from gfe.simulation import simulate_panel

from conftest import make_spec, random_panel


def _grouping(rng, N, G):
    gamma = np.concatenate([np.arange(G), rng.integers(0, G, size=N - G)])
    return GroupAssignment(rng.permutation(gamma), G)


@pytest.fixture(scope="module")
def noiseless():
    spec = make_spec(G=3, N=300, T=12, k=2, sigma_v=0.0)
    panel, truth = simulate_panel(spec, 7)
    return panel, truth


class TestSsr:
    def test_unit_group_ssr_by_hand(self):
        p = PanelData(("a",), (1, 2, 3), np.array([[1.0, 0.0, 3.0]]), np.zeros((1, 3, 0)),
                      np.array([[True, False, True]]))
        dp = within_transform(p)  # observed demeaned y: (-1, 1)
        prof = GroupTimeProfiles([[0.0, 5.0, 4.0]])
        # modified: profile re-demeaned on observed periods -> (-2, 2); residuals (1, -1)
        assert unit_group_ssr(dp, 0, [], prof, 0, "modified") == 2.0
        # unmodified: residuals (-1, -3)
        assert unit_group_ssr(dp, 0, [], prof, 0, "unmodified") == 10.0

    @pytest.mark.parametrize("method", ["modified", "unmodified"])
    def test_matrix_matches_unit_loop(self, rng, method):
        p = random_panel(rng, 15, 5, 2, missing=0.3)
        dp = within_transform(p)
        prof = GroupTimeProfiles(rng.normal(size=(3, 5)))
        theta = rng.normal(size=2)
        mat = ssr_matrix(dp, theta, prof, method)
        loop = np.array([[unit_group_ssr(dp, i, theta, prof, g, method) for g in range(3)]
                         for i in range(15)])
        np.testing.assert_allclose(mat, loop, rtol=1e-12, atol=1e-12)


class TestAssignmentStep:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), method=st.sampled_from(["modified", "unmodified"]))
    def test_brute_force(self, seed, method):
        rng = np.random.default_rng(seed)
        p = random_panel(rng, 12, 4, 1, missing=0.25)
        dp = within_transform(p)
        prof = GroupTimeProfiles(rng.normal(size=(3, 4)))
        theta = rng.normal(size=1)
        got = assignment_step(dp, theta, prof, method=method).gamma
        for i in range(12):
            costs = [unit_group_ssr(dp, i, theta, prof, g, method) for g in range(3)]
            assert costs[got[i]] <= min(costs) + 1e-12

    def test_ties_go_to_smallest_label(self):
        p = PanelData(("a",), (1, 2), np.array([[0.0, 0.0]]), np.zeros((1, 2, 0)), np.ones((1, 2), bool))
        prof = GroupTimeProfiles([[1.0, -1.0], [-1.0, 1.0]])
        assert assignment_step(within_transform(p), [], prof).gamma.tolist() == [0]

    def test_singleton_keeps_previous(self, three_unit):
        dp = within_transform(three_unit)
        prof = GroupTimeProfiles([[0.0, 0.0], [-10.0, 10.0]])
        prev = GroupAssignment([1, 1, 1], 2)
        got = assignment_step(dp, [], prof, prev)
        assert got.gamma[1] == 1


class TestParameterStep:
    @pytest.mark.parametrize("method", ["modified", "unmodified"])
    def test_matches_dense(self, rng, method):
        p = random_panel(rng, 40, 6, 2, missing=0.3)
        dp = within_transform(p)
        a = _grouping(rng, 40, 3)
        step = parameter_step if method == "modified" else unmodified_parameter_step
        th, prof = step(dp, a)
        th_d, prof_d = dense_parameter_step(dp, a, method)
        np.testing.assert_allclose(th, th_d, atol=1e-10)
        np.testing.assert_allclose(prof.alpha_dot, prof_d.alpha_dot, atol=1e-10)

    def test_fixed_theta_matches_dense(self, rng):
        dp = within_transform(random_panel(rng, 30, 5, 2, missing=0.2))
        a = _grouping(rng, 30, 2)
        theta = np.array([0.3, -1.0])
        th, prof = parameter_step(dp, a, theta)
        _, prof_d = dense_parameter_step(dp, a, "modified", theta)
        np.testing.assert_array_equal(th, theta)
        np.testing.assert_allclose(prof.alpha_dot, prof_d.alpha_dot, atol=1e-10)

    def test_group_means_without_covariates(self, rng):
        # balanced, no covariates: each profile is the group's mean demeaned outcome
        p = random_panel(rng, 20, 4, 0)
        dp = within_transform(p)
        a = _grouping(rng, 20, 3)
        _, prof = parameter_step(dp, a)
        for g in range(3):
            np.testing.assert_allclose(prof.alpha_dot[g], dp.y[a.gamma == g].mean(axis=0), atol=1e-12)

    def test_unmodified_group_cell_means(self, rng):
        p = random_panel(rng, 30, 4, 0, missing=0.3)
        dp = within_transform(p)
        a = _grouping(rng, 30, 2)
        _, prof = unmodified_parameter_step(dp, a)
        for g in range(2):
            for t in range(4):
                cells = (a.gamma == g) & dp.mask[:, t]
                if cells.any():
                    assert abs(prof.alpha_dot[g, t] - dp.y[cells, t].mean()) <= 1e-12

    def test_rows_sum_to_zero(self, rng):
        dp = within_transform(random_panel(rng, 30, 6, 1, missing=0.3))
        _, prof = parameter_step(dp, _grouping(rng, 30, 3))
        assert np.max(np.abs(prof.alpha_dot.sum(axis=1))) <= 1e-12

    def test_noiseless_true_grouping(self, noiseless):
        panel, truth = noiseless
        th, prof = parameter_step(within_transform(panel), GroupAssignment(truth.gamma0, 3))
        np.testing.assert_allclose(th, truth.theta0, atol=1e-10)
        np.testing.assert_allclose(prof.alpha_dot, truth.profiles0, atol=1e-10)

    def test_empty_group_rejected(self, rng):
        dp = within_transform(random_panel(rng, 6, 3, 0))
        with pytest.raises(EmptyGroupError):
            parameter_step(dp, GroupAssignment([0, 0, 0, 2, 2, 2], 3))


class TestSingleGroup:
    def test_modified_equals_2wfe_unbalanced(self, rng):
        p = random_panel(rng, 40, 6, 2, missing=0.3)
        fit = gfe_fit(p, 1, n_starts=3, seed=1)
        ref = fit_2wfe(p)
        np.testing.assert_allclose(fit.theta, ref.theta, atol=1e-10)
        np.testing.assert_allclose(fit.alpha_dot[0], ref.alpha_dot, atol=1e-10)

    def test_unmodified_equals_method1(self, rng):
        p = random_panel(rng, 40, 6, 2, missing=0.3)
        fit = gfe_fit(p, 1, n_starts=3, seed=1, method="unmodified")
        ref = fit_time_effects(within_transform(p), 1)
        np.testing.assert_allclose(fit.theta, ref.theta, atol=1e-10)
        np.testing.assert_allclose(fit.alpha_dot[0], ref.alpha_dot, atol=1e-10)

    def test_three_unit_unmodified_sum(self, three_unit):
        fit = gfe_fit(three_unit, 1, n_starts=1, seed=0, method="unmodified")
        assert abs(fit.alpha_dot.sum() - 1 / 6) <= 1e-12
        fit = gfe_fit(three_unit, 1, n_starts=1, seed=0)
        assert abs(fit.alpha_dot.sum()) <= 1e-12


class TestAlgorithm:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), method=st.sampled_from(["modified", "unmodified"]))
    def test_objective_non_increasing(self, seed, method):
        rng = np.random.default_rng(seed)
        p = random_panel(rng, 40, 6, 1, missing=0.2)
        fit = gfe_fit(p, 3, n_starts=1, seed=seed % 1000, method=method)
        trace = np.array(fit.objective_trace)
        assert np.all(np.diff(trace) <= 1e-9 * (1 + trace[:-1]))

    def test_converged_fit_is_fixed_point(self, rng):
        p = random_panel(rng, 50, 5, 2, missing=0.2)
        fit = gfe_fit(p, 3, n_starts=5, seed=3)
        assert fit.converged
        dp = within_transform(p)
        again = assignment_step(dp, fit.theta, fit.profiles, fit.assignment)
        np.testing.assert_array_equal(again.gamma, fit.gamma)
        th, prof = parameter_step(dp, fit.assignment)
        np.testing.assert_allclose(th, fit.theta, atol=1e-10)
        np.testing.assert_allclose(prof.alpha_dot, fit.alpha_dot, atol=1e-10)
        assert abs(recompute_objective(dp, fit.theta, fit.profiles, fit.assignment) - fit.objective) \
            <= 1e-9 * fit.objective

    def test_label_permutation_invariance(self, rng):
        p = random_panel(rng, 40, 5, 1, missing=0.2)
        dp = within_transform(p)
        theta0 = np.array([0.2])
        gamma = _grouping(rng, 40, 3).gamma
        base = gfe_fit_single(dp, 3, StartingValues(theta0, gamma))
        for perm in itertools.permutations(range(3)):
            perm = np.array(perm)
            other = gfe_fit_single(dp, 3, StartingValues(theta0, perm[gamma]))
            assert abs(other.objective - base.objective) <= 1e-9 * base.objective
            np.testing.assert_allclose(other.theta, base.theta, atol=1e-10)
            np.testing.assert_array_equal(other.gamma, perm[base.gamma])

    def test_relabel_keeps_fit(self, rng):
        fit = gfe_fit(random_panel(rng, 30, 4, 1), 3, n_starts=2, seed=0)
        order = [2, 0, 1]
        r = fit.relabel(order)
        np.testing.assert_array_equal(r.alpha_dot, fit.alpha_dot[order])
        np.testing.assert_array_equal(r.alpha_dot[r.gamma], fit.alpha_dot[fit.gamma])

    def test_deterministic(self, rng):
        p = random_panel(rng, 40, 5, 2, missing=0.2)
        a = gfe_fit(p, 3, n_starts=6, seed=11)
        b = gfe_fit(p, 3, n_starts=6, seed=11)
        assert a.objective == b.objective and a.start_index == b.start_index
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.gamma, b.gamma)

    def test_one_start_replays_single_fit(self, rng):
        from gfe.estimator import draw_start

        p = random_panel(rng, 30, 5, 1)
        dp = within_transform(p)
        fit = gfe_fit(dp, 2, n_starts=1, seed=5)
        child = np.random.SeedSequence(5).spawn(1)[0]
        start = draw_start(dp, 2, fit_2wfe(dp).theta, np.random.default_rng(child))
        single = gfe_fit_single(dp, 2, start)
        assert single.objective == fit.objective
        np.testing.assert_array_equal(single.gamma, fit.gamma)

    def test_best_start_wins(self, rng):
        p = random_panel(rng, 40, 5, 1)
        many = gfe_fit(p, 3, n_starts=8, seed=2)
        for s in range(8):
            assert many.objective <= gfe_fit(p, 3, n_starts=s + 1, seed=2).objective

    def test_max_iter_reports_non_convergence(self, rng):
        p = random_panel(rng, 60, 6, 1)
        fit = gfe_fit(p, 4, n_starts=1, seed=0, max_iter=1)
        assert fit.iterations <= 1
        assert len(fit.objective_trace) == fit.iterations + 1

    def test_empty_group_repaired(self, rng):
        p = random_panel(rng, 30, 5, 1)
        fit = gfe_fit_single(p, 3, StartingValues(np.array([0.0]), np.zeros(30, dtype=int)))
        assert fit.assignment.sizes.min() >= 1

    def test_too_many_groups_fails(self):
        p = PanelData(("a", "b"), (1, 2), np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros((2, 2, 0)),
                      np.ones((2, 2), bool))
        with pytest.raises(EmptyGroupError):
            gfe_fit(p, 3, n_starts=2, seed=0)


class TestRecovery:
    def test_noiseless_g3(self, noiseless):
        panel, truth = noiseless
        fit = gfe_fit(panel, 3, n_starts=20, seed=0)
        np.testing.assert_allclose(fit.theta, truth.theta0, atol=1e-8)
        assert fit.objective <= 1e-16 * panel.n_obs
        # labels agree with the truth up to a permutation
        pairs = set(zip(fit.gamma.tolist(), truth.gamma0.tolist()))
        assert len(pairs) == 3


class TestSweep:
    def test_nested_objectives(self, rng):
        p = random_panel(rng, 50, 6, 1, missing=0.2)
        res = g_sweep(p, range(1, 5), n_starts=3, seed=0)
        obj = res.objectives.to_numpy()
        assert np.all(np.diff(obj) <= 1e-9 * obj[:-1])

    def test_table_shapes(self, rng):
        p = random_panel(rng, 30, 4, 2)
        res = g_sweep(p, [1, 3], n_starts=2, seed=0)
        assert len(res.estimates) == 2 * 2
        assert len(res.profiles) == (1 + 3) * 4
        assert set(res.estimates["G"]) == {1, 3}


def test_relabel_objective_bit_identical(rng):
    p = random_panel(rng, 40, 6, 1, missing=0.2)
    dp = within_transform(p)
    fit = gfe_fit(dp, 3, n_starts=2, seed=1)
    base = recompute_objective(dp, fit.theta, fit.profiles, fit.assignment)
    for order in itertools.permutations(range(3)):
        r = fit.relabel(order)
        assert recompute_objective(dp, r.theta, r.profiles, r.assignment) == base


class TestUnmodifiedCoding:
    def test_balanced_matches_modified_after_shift(self, rng):
        dp = within_transform(random_panel(rng, 30, 5, 2))
        a = _grouping(rng, 30, 3)
        th_m, prof_m = parameter_step(dp, a)
        th_u, prof_u = unmodified_parameter_step(dp, a)
        np.testing.assert_allclose(th_u, th_m, atol=1e-10)
        np.testing.assert_allclose(prof_u.alpha_shifted, prof_m.alpha_shifted, atol=1e-10)

    def test_unbalanced_single_group_differs_from_2wfe(self, rng):
        p = random_panel(rng, 30, 5, 1, missing=0.3)
        fit = gfe_fit(p, 1, n_starts=1, seed=0, method="unmodified")
        assert np.max(np.abs(fit.alpha_shifted[0, 1:] - fit_2wfe(p).alpha_tilde)) > 1e-6


def test_sweep_flattens_at_true_g():
    spec = make_spec(G=3, N=600, T=10, k=1, sigma_v=0.3, rho=np.array([[0.6, -0.5, 0.4]]),
                     theta0=np.array([0.5]))
    panel, truth = simulate_panel(spec, 11)
    res = g_sweep(panel, range(1, 5), n_starts=20, seed=0)
    err = {G: abs(f.theta[0] - 0.5) for G, f in res.fits.items()}
    assert err[1] > 0.05
    assert err[3] < 0.02 and err[4] < 0.02
