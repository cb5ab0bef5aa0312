import itertools
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from gfe.estimator import GroupAssignment, gfe_fit
from gfe.inference import (
    BootstrapError,
    LabelPermutation,
    bootstrap,
    group_summaries,
    match_labels,
    percentile_intervals,
    proportional_effect,
    shift_profiles,
)
from gfe.panel import PanelData, within_transform
from gfe.simulation import simulate_panel

from conftest import make_spec, random_panel


def brute_force_match(reference, candidate):
    """Oracle: every permutation, first minimum in lexicographic order."""
    G = len(reference)
    best, best_cost = None, math.inf
    for perm in itertools.permutations(range(G)):
        cost = sum(float(np.linalg.norm(np.subtract(reference[g], candidate[perm[g]]))) for g in range(G))
        if cost < best_cost - 1e-12:
            best, best_cost = perm, cost
    return list(best), best_cost


def test_shift_profiles():
    s = shift_profiles([[0.2, 0.7, -0.9], [1.0, 1.0, -2.0]])
    np.testing.assert_allclose(s, [[0.0, 0.5, -1.1], [0.0, 0.0, -3.0]], atol=1e-15)
    assert abs(math.exp(s[0, 1]) - 1.6487) < 1e-4


class TestMatchLabels:
    def test_identity(self):
        r = np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 3.0]])
        m = match_labels(r, r)
        assert m.mapping.tolist() == [0, 1, 2]
        assert m.aggregate_distance == 0.0

    def test_reversal(self):
        r = np.array([[0.0, 1.0], [0.0, -1.0], [0.0, 3.0]])
        m = match_labels(r, r[::-1])
        assert m.mapping.tolist() == [2, 1, 0]
        np.testing.assert_array_equal(m.apply_profiles(r[::-1]), r)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), G=st.integers(1, 6))
    def test_matches_brute_force(self, seed, G):
        rng = np.random.default_rng(seed)
        r, c = rng.normal(size=(G, 5)), rng.normal(size=(G, 5))
        perm, cost = brute_force_match(r, c)
        ex = match_labels(r, c, "exhaustive")
        asg = match_labels(r, c, "assignment")
        assert ex.mapping.tolist() == perm
        assert abs(ex.aggregate_distance - cost) <= 1e-12
        assert abs(asg.aggregate_distance - cost) <= 1e-9

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_invariant_to_candidate_order(self, seed):
        rng = np.random.default_rng(seed)
        r = rng.normal(size=(4, 3))
        c = r + 0.01 * rng.normal(size=(4, 3))
        order = rng.permutation(4)
        a = match_labels(r, c)
        b = match_labels(r, c[order])
        np.testing.assert_array_equal(a.apply_profiles(c), b.apply_profiles(c[order]))

    def test_label_translation(self):
        m = LabelPermutation(np.array([2, 0, 1]), 0.0)
        # candidate label 2 corresponds to reference label 0
        assert m.apply_labels([2, 0, 1]).tolist() == [0, 1, 2]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            match_labels(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_not_a_permutation(self):
        with pytest.raises(ValueError):
            LabelPermutation(np.array([0, 0]), 0.0)


def test_percentile_intervals_linear():
    v = np.arange(1.0, 6.0)[:, None]
    iv = percentile_intervals(v, (25, 75))
    np.testing.assert_allclose(iv, [[2.0, 4.0]])


@pytest.fixture(scope="module")
def small_sim():
    spec = make_spec(G=2, N=60, T=5, k=1, sigma_v=0.3)
    panel, _ = simulate_panel(spec, 3)
    return panel


class TestBootstrap:
    def test_identity_sampler_reproduces_reference(self, small_sim):
        ref = gfe_fit(small_sim, 2, n_starts=5, seed=0)
        res = bootstrap(small_sim, 2, B=3, n_starts=5, seed=0, reference=ref,
                        sampler=lambda rng, n: np.arange(n))
        for b in range(3):
            np.testing.assert_allclose(res.matched_thetas[b], ref.theta, atol=1e-10)
            np.testing.assert_allclose(res.matched_profiles[b], ref.alpha_shifted, atol=1e-10)
        assert np.allclose(res.distances, 0.0, atol=1e-9)

    def test_constant_replicates_give_degenerate_intervals(self, small_sim):
        ref = gfe_fit(small_sim, 2, n_starts=5, seed=0)
        res = bootstrap(small_sim, 2, B=4, n_starts=5, seed=0, reference=ref,
                        sampler=lambda rng, n: np.arange(n))
        lo, hi = res.intervals_theta[..., 0], res.intervals_theta[..., 1]
        np.testing.assert_allclose(lo, hi, atol=1e-10)

    def test_deterministic_and_monotone(self, small_sim):
        a = bootstrap(small_sim, 2, B=6, n_starts=3, seed=4)
        b = bootstrap(small_sim, 2, B=6, n_starts=3, seed=4)
        np.testing.assert_array_equal(a.matched_thetas, b.matched_thetas)
        np.testing.assert_array_equal(a.matched_profiles, b.matched_profiles)
        for wide, narrow in zip(a.intervals((5, 95)), a.intervals((25, 75))):
            assert np.all(wide[..., 0] <= narrow[..., 0]) and np.all(narrow[..., 1] <= wide[..., 1])
        assert np.all(a.intervals_profiles[..., 0] <= a.intervals_profiles[..., 1])

    def test_frames(self, small_sim):
        res = bootstrap(small_sim, 2, B=3, n_starts=2, seed=0)
        frame = res.interval_frame()
        assert len(frame) == 2 * 5
        assert (frame.lower <= frame.upper).all()
        assert len(res.matched_frame()) == 3 * 2 * 5

    def test_failure_budget(self, small_sim):
        def bad_sampler(rng, n):
            return np.zeros(n, dtype=int)  # one unit copied: too few distinct rows for G=2

        with pytest.raises(BootstrapError):
            bootstrap(small_sim, 2, B=5, n_starts=1, seed=0, sampler=bad_sampler)


def test_proportional_effect():
    assert proportional_effect(0.0, 1.0) == 0.0
    assert abs(proportional_effect(0.1, math.log(2)) - (2 ** 0.1 - 1)) < 1e-15
    assert abs(proportional_effect(1.0, 0.5) - (math.exp(0.5) - 1)) < 1e-15


class TestGroupSummaries:
    def _panel(self):
        y = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        return PanelData(("a", "b", "c"), (1, 2), y, np.zeros((3, 2, 0)), np.ones((3, 2), bool))

    def test_quartiles_and_sd(self):
        s = group_summaries(self._panel(), GroupAssignment([0, 0, 1], 2))
        row = s.stats[(s.stats.group == 1) & (s.stats.variable == "y")].iloc[0]
        assert (row["q1"], row["median"], row["q3"]) == (1.75, 2.5, 3.25)
        assert abs(row["sd"] - np.std([1, 2, 3, 4], ddof=1)) < 1e-15
        np.testing.assert_allclose(s.groups.share.sum(), 1.0)

    def test_mapping_and_unit_columns(self):
        uc = pd.DataFrame({"size": [1.0, 2.0, 4.0]}, index=["a", "b", "c"])
        s = group_summaries(self._panel(), {"a": 0, "b": 1, "c": 1}, unit_columns=uc)
        row = s.stats[(s.stats.group == 2) & (s.stats.variable == "size")].iloc[0]
        assert row["mean"] == 3.0 and row["count"] == 2
        assert s.groups.units.tolist() == [1, 2]

    def test_unknown_unit(self):
        with pytest.raises(KeyError):
            group_summaries(self._panel(), {"a": 0, "b": 0, "c": 1, "zz": 0})

    def test_random_shares_sum_to_one(self, rng):
        p = random_panel(rng, 25, 4, 1)
        g = gfe_fit(within_transform(p), 3, n_starts=2, seed=0).assignment
        s = group_summaries(p, g)
        assert abs(s.groups.share.sum() - 1.0) < 1e-15


def test_proportional_effect_reported_values():
    assert round(proportional_effect(0.144, 0.1), 4) == 0.0145
    assert round(proportional_effect(-0.147, 0.1), 4) == -0.0146


def test_single_group_quartiles():
    p = PanelData(("a", "b", "c"), (1,), np.array([[1.0], [2.0], [3.0]]), np.zeros((3, 1, 0)),
                  np.ones((3, 1), bool))
    row = group_summaries(p, GroupAssignment([0, 0, 0], 1)).stats.iloc[0]
    assert (row["mean"], row["median"], row["q1"], row["q3"]) == (2.0, 2.0, 1.5, 2.5)


def test_disjoint_groups_straddle_global_mean(rng):
    y = np.concatenate([rng.uniform(0, 1, (10, 3)), rng.uniform(5, 6, (10, 3))])
    p = PanelData(tuple(range(20)), (1, 2, 3), y, np.zeros((20, 3, 0)), np.ones((20, 3), bool))
    stats = group_summaries(p, GroupAssignment(np.repeat([0, 1], 10), 2)).stats
    means = stats.set_index("group")["mean"]
    assert means[1] < y.mean() < means[2]
