import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from offline_pretrain.core import (OfflineDataset, ReturnConfig, Trajectory, Transition,
                                   VisitMode, annotate_dataset)
from offline_pretrain.envs import (LEFT, RIGHT, BehaviorPolicySpec, generate_dataset,
                                   motivational_mdp, random_tabular_mdp)
from offline_pretrain.tabular import (InitKind, InitStrategy, QTable, contraction_iteration_bound,
                                      first_optimal_epoch, fitted_q_iteration, fqi_init_sweep,
                                      mc_initialize, q_learning_epoch, run_q_learning,
                                      solve_optimal_tabular, table1_expected, table1_grid)


def annotated_motivational(gamma=1.0):
    mdp, ds = motivational_mdp()
    return mdp, annotate_dataset(ds, ReturnConfig(gamma=gamma))


def visited(q):
    return [q.values[0, RIGHT], q.values[1, LEFT], q.values[1, RIGHT], q.values[2, RIGHT]]


class TestMcInitialize:
    def test_every_visit(self):
        mdp, ds = annotated_motivational()
        q = mc_initialize(ds, 1.0, VisitMode.EVERY_VISIT, action_mask=mdp.action_mask)
        assert visited(q) == [0.5, 0, 1, 3]
        assert q.visited_mask.sum() == 4

    def test_first_visit(self):
        mdp, ds = annotated_motivational()
        q = mc_initialize(ds, 1.0, "FirstVisit", action_mask=mdp.action_mask)
        assert visited(q) == [0, 0, 1, 3]

    def test_empty(self):
        q = mc_initialize(OfflineDataset(()), 1.0, "EveryVisit", 3, 2)
        assert not q.values.any() and not q.visited_mask.any()

    def test_gamma_mismatch(self):
        mdp, ds = annotated_motivational(0.9)
        with pytest.raises(ValueError):
            mc_initialize(ds, 1.0, "EveryVisit", action_mask=mdp.action_mask)

    def test_unannotated(self):
        mdp, ds = motivational_mdp()
        with pytest.raises(ValueError):
            mc_initialize(ds, 1.0, "EveryVisit", action_mask=mdp.action_mask)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.5, 1.0))
    def test_every_visit_matches_recount(self, seed, gamma):
        mdp = random_tabular_mdp(4, 3, seed)
        ds = generate_dataset(mdp, BehaviorPolicySpec("EpsilonGreedyTabular", quality=0.3), 5,
                              seed=seed, max_steps=12)
        ds = annotate_dataset(ds, ReturnConfig(gamma=gamma))
        q = mc_initialize(ds, gamma, "EveryVisit", 4, 3)
        arr = ds.arrays
        for s in range(4):
            for a in range(3):
                hits = (arr["obs"] == s) & (arr["actions"] == a)
                expect = arr["rtg"][hits].mean() if hits.any() else 0.0
                assert q.values[s, a] == pytest.approx(expect, abs=1e-12)
                assert q.visited_mask[s, a] == hits.any()


class TestQLearning:
    def test_zero_init_rows(self):
        mdp, ds = annotated_motivational()
        q = QTable.zeros(mdp, 1.0)
        q1 = q_learning_epoch(q, ds, 1.0, 1.0)
        q2 = q_learning_epoch(q1, ds, 1.0, 1.0)
        assert visited(q1) == [0, -1, -2, 3]
        assert visited(q2) == [-2, -2, 1, 3]

    def test_mc_init_row(self):
        mdp, ds = annotated_motivational()
        q = mc_initialize(ds, 1.0, "EveryVisit", action_mask=mdp.action_mask)
        assert visited(q_learning_epoch(q, ds, 1.0, 1.0)) == [1, 0, 1, 3]

    def test_lr_range(self):
        mdp, ds = annotated_motivational()
        with pytest.raises(ValueError):
            q_learning_epoch(QTable.zeros(mdp, 1.0), ds, 0.0, 1.0)

    def test_history_stops_on_fixed_point(self):
        mdp, ds = annotated_motivational()
        hist = run_q_learning(mdp, ds, InitStrategy(InitKind.ZERO), max_epochs=50)
        assert len(hist) == 5  # epochs 0..3 plus the unchanged epoch 4
        assert np.array_equal(hist[-1].values, hist[-2].values)

    @pytest.mark.parametrize("mode", list(VisitMode))
    def test_table1_grid(self, mode):
        zero, mc, _, _ = table1_grid(mode)
        ez, em = table1_expected(mode)
        np.testing.assert_array_equal(zero, ez)
        np.testing.assert_array_equal(mc, em)

    def test_convergence_epochs(self):
        mdp, _ = motivational_mdp()
        q_star = solve_optimal_tabular(mdp, 1.0)
        _, _, zh, mh = table1_grid()
        assert first_optimal_epoch(zh, q_star) == 3
        assert first_optimal_epoch(zh, q_star, policy=True) == 2
        assert first_optimal_epoch(mh, q_star) == 1
        assert first_optimal_epoch(mh, q_star, policy=True) == 0


class TestInitStrategy:
    def test_beta_range(self):
        q = QTable(np.zeros((2, 2)), 0.9, np.ones((2, 2), bool))
        with pytest.raises(ValueError):
            InitStrategy.interpolated(1.5, q)

    def test_interpolated_needs_anchor(self):
        with pytest.raises(ValueError):
            InitStrategy(InitKind.INTERPOLATED, 0.5)

    def test_non_finite_table(self):
        with pytest.raises(ValueError):
            QTable(np.array([[np.nan]]), 0.9, np.ones((1, 1), bool))


class TestFittedQ:
    gamma = 0.9

    def setup_method(self):
        self.mdp = random_tabular_mdp(10, 4, seed=7)
        self.q_star = solve_optimal_tabular(self.mdp, self.gamma, tol=1e-13)

    def test_start_at_optimum(self):
        rep = fitted_q_iteration(self.mdp, self.gamma, self.q_star, 1e-3)
        assert rep.iterations == 0 and rep.epsilons == []

    def test_exact_operator_within_contraction_bound(self):
        q0 = QTable.zeros(self.mdp, self.gamma)
        rep = fitted_q_iteration(self.mdp, self.gamma, q0, 1e-3)
        assert rep.converged and rep.final_error <= 1e-3
        assert len(rep.epsilons) == rep.iterations
        assert rep.iterations <= contraction_iteration_bound(rep.init_error, 1e-3, self.gamma)

    def test_noisy_bound(self):
        q0 = QTable.zeros(self.mdp, self.gamma)
        rep = fitted_q_iteration(self.mdp, self.gamma, q0, 0.05, noise_scale=0.002, seed=1)
        bound = rep.bound(self.gamma)
        assert all(e <= b + 1e-12 for e, b in zip(rep.errors, bound))

    def test_failure_flag(self):
        q0 = QTable.zeros(self.mdp, self.gamma)
        rep = fitted_q_iteration(self.mdp, self.gamma, q0, 1e-3, max_iters=3)
        assert not rep.converged and rep.iterations == 3

    def test_gamma_one_rejected(self):
        with pytest.raises(ValueError):
            fitted_q_iteration(self.mdp, 1.0, QTable.zeros(self.mdp, 1.0), 1e-3)

    def test_zero_init_needs_at_least_mc_iterations(self):
        beh = BehaviorPolicySpec("EpsilonGreedyTabular", quality=0.5)
        ds = generate_dataset(self.mdp, beh, 200, seed=0, max_steps=60)
        ds = annotate_dataset(ds, ReturnConfig(gamma=self.gamma))
        q_mc = mc_initialize(ds, self.gamma, "EveryVisit", 10, 4)
        k_zero = fitted_q_iteration(self.mdp, self.gamma, QTable.zeros(self.mdp, self.gamma), 1e-3)
        k_mc = fitted_q_iteration(self.mdp, self.gamma, q_mc, 1e-3)
        assert k_zero.iterations >= k_mc.iterations

    def test_sweep_monotone(self):
        anchors = [InitStrategy.interpolated(b, self.q_star) for b in (0, 0.25, 0.5, 0.75, 0.9, 1)]
        reps = fqi_init_sweep(self.mdp, self.gamma, anchors, 1e-3)
        ks = [r.iterations for r in reps]
        assert ks == sorted(ks, reverse=True) and ks[-1] == 0
        assert [r.beta for r in reps] == [0, 0.25, 0.5, 0.75, 0.9, 1]

    def test_sweep_needs_anchors(self):
        with pytest.raises(ValueError):
            fqi_init_sweep(self.mdp, self.gamma, [], 1e-3)
