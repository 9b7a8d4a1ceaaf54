import numpy as np
import pytest

from oracles import LQTreeProblem, ReferenceALiLQR, lq_tree_optimum
from riskbmpc.constraints import ConstraintState
from riskbmpc.core import ProbabilityVector, SolverSettings, build_tree
from riskbmpc.risk import AmbiguitySet, ascent_step, cvar_value
from riskbmpc.scenario import build_instance, make_scenario
from riskbmpc.solver import (
    FeedbackLaw,
    RegularizationNeeded,
    SolveStats,
    apply_law,
    backward_pass,
    build_local_models,
    evaluate,
    forward_pass,
    minmax_ilqr_tree,
    resolve_ascent_parameters,
    solve,
)


def lq_instance(seed, d=3, Ts=3, T=8):
    rng = np.random.default_rng(seed)
    pr = LQTreeProblem(rng, 3, 2, Ts, T, d)
    p = ProbabilityVector(rng.dirichlet(np.ones(d)))
    tree = build_tree(pr.x0, rng.normal(size=(Ts, 2)), rng.normal(size=(d, T - Ts, 2)), pr.dynamics)
    cstate = ConstraintState.zeros_like(pr.constraints(tree), 1.0)
    return pr, p, tree, cstate


@pytest.fixture(scope="module")
def ts1():
    cfg = make_scenario("TS1")
    return cfg, build_instance(cfg, cfg.ego_x0())


class TestLQ:
    @pytest.mark.parametrize("seed", range(10))
    def test_one_pass_is_optimal(self, seed):
        pr, p, tree, cstate = lq_instance(seed)
        law, _ = backward_pass(build_local_models(pr, tree, p.values, cstate), 0.0)
        new = apply_law(pr, tree, law, 1.0)
        J = evaluate(pr, new, p.values, cstate).objective
        J_opt, us, ub = lq_tree_optimum(pr, p.values)
        assert abs(J - J_opt) <= 1e-8 * max(1.0, abs(J_opt))
        np.testing.assert_allclose(new.shared_inputs, us, atol=1e-7)
        np.testing.assert_allclose(new.branch_inputs, ub, atol=1e-7)

    def test_full_step_accepted_first(self):
        pr, p, tree, cstate = lq_instance(11)
        settings = SolverSettings()
        law, _ = backward_pass(build_local_models(pr, tree, p.values, cstate), 0.0)
        _, new, step, accepted = forward_pass(pr, tree, law, p.values, cstate, settings)
        assert accepted and step == 1.0
        # The exact model predicts the decrease.
        old = evaluate(pr, tree, p.values, cstate)
        assert new.total - old.total == pytest.approx(law.expected_change(1.0), rel=1e-8)

    def test_zero_law_is_a_fixed_point(self):
        pr, p, tree, cstate = lq_instance(12)
        d, Tb = tree.num_branches, tree.branch_length
        zero = FeedbackLaw(np.zeros((tree.split_step, 2, 3)), np.zeros((tree.split_step, 2)), np.zeros((d, Tb, 2, 3)), np.zeros((d, Tb, 2)))
        again = apply_law(pr, tree, zero, 1.0)
        np.testing.assert_array_equal(again.shared_states, tree.shared_states)
        np.testing.assert_array_equal(again.branch_states, tree.branch_states)
        out, new, step, accepted = forward_pass(pr, tree, zero, p.values, cstate, SolverSettings())
        assert accepted and step == 0.0 and out is tree

    def test_ascent_direction_rejected(self):
        pr, p, tree, cstate = lq_instance(13)
        settings = SolverSettings()
        law, _ = backward_pass(build_local_models(pr, tree, p.values, cstate), 0.0)
        bad = FeedbackLaw(law.K_shared, -law.d_shared, law.K_branch, -law.d_branch, law.dV_linear, law.dV_quadratic)
        out, _, step, accepted = forward_pass(pr, tree, bad, p.values, cstate, settings)
        assert not accepted and step == 0.0 and out is tree

    def test_parallel_backward_matches_serial(self):
        pr, p, tree, cstate = lq_instance(14, d=4)
        models = build_local_models(pr, tree, p.values, cstate)
        a, va = backward_pass(models, 0.0)
        b, vb = backward_pass(models, 0.0, parallel=True)
        for name in ("K_shared", "d_shared", "K_branch", "d_branch"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        np.testing.assert_array_equal(va.Vxx_shared, vb.Vxx_shared)

    def test_value_at_root_matches_oracle(self):
        pr, p, tree, cstate = lq_instance(15)
        models = build_local_models(pr, tree, p.values, cstate)
        law, values = backward_pass(models, 0.0)
        old = evaluate(pr, tree, p.values, cstate).objective
        J_opt, _, _ = lq_tree_optimum(pr, p.values)
        # Expected change of the exact model equals the achievable decrease.
        assert old + law.expected_change(1.0) == pytest.approx(J_opt, rel=1e-9)
        assert values.Vxx_shared.shape == (tree.split_step + 1, 3, 3)

    def test_unconstrained_solve_converges_in_one_outer(self):
        pr, p, tree, _ = lq_instance(16)
        res = solve(pr, tree, p, SolverSettings(risk_aware=False))
        assert res.converged and res.outer_iters == 1
        assert res.final_cost == pytest.approx(lq_tree_optimum(pr, p.values)[0], rel=1e-9)

    def test_non_pd_quu_signals_regularization(self):
        pr, p, tree, cstate = lq_instance(17)
        pr.H_shared = pr.H_shared.copy()
        pr.H_shared[0, 3:, 3:] = -10.0 * np.eye(2)
        with pytest.raises(RegularizationNeeded):
            backward_pass(build_local_models(pr, tree, p.values, cstate), 0.0)

    def test_regularization_cap_gives_unconverged_result(self):
        pr, p, tree, _ = lq_instance(18)
        pr.H_shared = pr.H_shared.copy()
        pr.H_shared[:, 3:, 3:] = -10.0 * np.eye(2)
        res = solve(pr, tree, p, SolverSettings(hessian_reg_max=1.0, risk_aware=False))
        assert not res.converged
        assert np.all(np.isfinite(res.tree.shared_states))


def test_zero_weight_branch_handled():
    # With q_i = 0 branch i contributes no curvature; the solver regularizes
    # within the iteration instead of failing.
    pr, _, tree, _ = lq_instance(19, d=2)
    p = ProbabilityVector([1.0, 0.0])
    res = solve(pr, tree, p, SolverSettings(risk_aware=False))
    assert res.converged


def test_probability_length_checked():
    pr, _, tree, _ = lq_instance(20, d=3)
    with pytest.raises(ValueError):
        solve(pr, tree, ProbabilityVector([0.5, 0.5]), SolverSettings())


def test_ascent_parameters():
    s = SolverSettings(gamma_rel=2.0, rho_rel=0.1)
    g, r = resolve_ascent_parameters(s, [10.0, -40.0])
    assert g == pytest.approx(2.0 / 40.0) and r == pytest.approx(0.1 * 40.0)
    assert resolve_ascent_parameters(s.with_(gamma=0.3, rho0=2.0), [1.0]) == (0.3, 2.0)
    with pytest.raises(ValueError):
        s.with_(gamma=1.0, rho0=2.0)
    # One absolute, one scaled: checked once the cost scale is known.
    with pytest.raises(ValueError):
        resolve_ascent_parameters(s.with_(gamma=1.0), [10.0, -40.0])


class TestRegularizedQSubproblem:
    """Fixed branch costs: the ascent alone, against the closed-form regularized maximizer."""

    def run(self, J, rho, iters=2000, gamma=0.05):
        aset = AmbiguitySet([0.5, 0.5], 0.0)
        q = ProbabilityVector([0.5, 0.5])
        for _ in range(iters):
            q = ascent_step(aset, q, J, gamma, rho)
        return q.values

    def test_unregularized_goes_to_vertex(self):
        np.testing.assert_allclose(self.run([2.0, 1.0], 0.0), [1.0, 0.0], atol=1e-12)

    def test_large_rho_stays_interior(self):
        # argmax q.J - rho/2 |q|^2 on the simplex is the projection of J / rho: (0.55, 0.45).
        np.testing.assert_allclose(self.run([2.0, 1.0], 10.0), [0.55, 0.45], atol=1e-9)


def test_monotone_inner_descent(ts1):
    """AL-total never increases over accepted passes with q fixed."""
    _, inst = ts1
    pr, p = inst.problem, inst.p
    settings = SolverSettings()
    tree = build_tree(pr.x0, inst.initial.shared_inputs, inst.initial.branch_inputs, pr.dynamics)
    cstate = ConstraintState.zeros_like(pr.constraints(tree), 10.0)
    current = evaluate(pr, tree, p.values, cstate)
    accepted_any = False
    reg = 0.0
    for _ in range(20):
        try:
            law, _ = backward_pass(build_local_models(pr, tree, p.values, cstate), reg)
        except RegularizationNeeded:
            reg = max(10 * reg, 1e-6)
            continue
        tree, new, step, accepted = forward_pass(pr, tree, law, p.values, cstate, settings, current)
        if accepted:
            assert new.total <= current.total + 1e-12
            accepted_any = accepted_any or step > 0
        current = new
    assert accepted_any


def test_risk_dominance_and_q_in_set(ts1):
    cfg, inst = ts1
    res = solve(inst.problem, inst.initial, inst.p, cfg.settings.with_(alpha=cfg.alpha))
    aset = AmbiguitySet(inst.p, cfg.alpha)
    assert aset.contains(res.q_final.values)
    worst, _ = cvar_value(aset, res.branch_costs)
    assert worst >= inst.p.values @ res.branch_costs - 1e-9


def test_nominal_keeps_p_and_risk_aware_differs(ts1):
    cfg, inst = ts1
    nominal = solve(inst.problem, inst.initial, inst.p, cfg.settings.with_(alpha=cfg.alpha, risk_aware=False))
    risk = solve(inst.problem, inst.initial, inst.p, cfg.settings.with_(alpha=cfg.alpha))
    assert nominal.q_final == inst.p
    assert nominal.converged and risk.converged
    assert np.max(np.abs(risk.q_final.values - inst.p.values)) > 0.05
    assert np.max(np.abs(risk.tree.shared_inputs - nominal.tree.shared_inputs)) > 1e-3
    # The adversary shifts weight onto the costlier branches.
    assert risk.q_final.values @ risk.branch_costs > inst.p.values @ risk.branch_costs


def test_alpha_one_matches_nominal(ts1):
    cfg, inst = ts1
    risk = solve(inst.problem, inst.initial, inst.p, cfg.settings.with_(alpha=1.0))
    nominal = solve(inst.problem, inst.initial, inst.p, cfg.settings.with_(alpha=1.0, risk_aware=False))
    np.testing.assert_allclose(risk.q_final.values, inst.p.values, atol=1e-12)
    assert abs(risk.final_cost - nominal.final_cost) <= 1e-6


def test_single_branch_matches_reference(ts1):
    cfg, _ = ts1
    inst = build_instance(cfg, cfg.ego_x0(), modes=[3])
    settings = cfg.settings.with_(alpha=cfg.alpha)
    res = solve(inst.problem, inst.initial, inst.p, settings)
    _, _, obj, converged = ReferenceALiLQR(inst.problem, settings).solve(inst.initial)
    assert res.converged == converged
    assert abs(res.final_cost - obj) <= 1e-8 * max(1.0, abs(obj))


def test_parallel_solve_matches_serial(ts1):
    cfg, inst = ts1
    s = cfg.settings.with_(alpha=cfg.alpha)
    a = solve(inst.problem, inst.initial, inst.p, s)
    b = solve(inst.problem, inst.initial, inst.p, s.with_(parallel_branches=True))
    assert a.total_inner_iters == b.total_inner_iters
    assert a.final_cost == b.final_cost


def test_q_history_and_stats():
    pr, p, tree, cstate = lq_instance(21, d=2)
    stats = SolveStats()
    s = SolverSettings(alpha=0.3)
    _, q, ok = minmax_ilqr_tree(pr, tree, p, p, cstate, s, 0.01, 1.0, stats)
    assert stats.inner_iters >= 1
    assert stats.q_updates == len(stats.q_history)
    assert AmbiguitySet(p, 0.3).contains(q.values)
