"""Min-max augmented-Lagrangian iLQR on a trajectory tree.

The minimizing player runs iLQR on the tree: branch value functions are
propagated from the leaves to the branching node, summed there, and the
shared segment is recursed back to the root. Branch stage and terminal
models are scaled by the current adversarial weights ``q``; constraint
terms are not, since every branch has to be feasible on its own. After each
accepted forward pass the maximizing player takes one regularized projected
ascent step on ``q``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .constraints import (
    ConstraintState,
    TreeArrays,
    augmented_cost,
    augmented_terms,
    max_violation,
    update_multipliers,
)
from .core import ProbabilityVector, SolveResult, SolverSettings, TrajectoryTree, build_tree
from ._kernels import run_chain
from .costs import QuadraticModel
from .risk import AmbiguitySet, ascent_step, rho_schedule

log = logging.getLogger(__name__)


class TreeProblem(Protocol):
    """What the solver needs to know about a branch MPC problem."""

    nx: int
    nu: int
    x0: np.ndarray

    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def linearize(self, x: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...

    def costs(self, tree: TrajectoryTree) -> TreeArrays: ...

    def cost_models(self, tree: TrajectoryTree) -> tuple[QuadraticModel, QuadraticModel, tuple]: ...

    def constraints(self, tree: TrajectoryTree) -> TreeArrays: ...

    def constraint_jacobians(self, tree: TrajectoryTree) -> tuple[TreeArrays, TreeArrays, tuple]: ...


class RegularizationNeeded(Exception):
    """Q_uu plus the current regularization is not positive definite."""


@dataclass
class FeedbackLaw:
    """Affine corrections ``du = K dx + d`` per tree node plus the expected-change model."""

    K_shared: np.ndarray  # (T_s, nu, nx)
    d_shared: np.ndarray  # (T_s, nu)
    K_branch: np.ndarray  # (d, T - T_s, nu, nx)
    d_branch: np.ndarray  # (d, T - T_s, nu)
    dV_linear: float = 0.0
    dV_quadratic: float = 0.0

    def expected_change(self, step: float) -> float:
        return step * self.dV_linear + 0.5 * step**2 * self.dV_quadratic


@dataclass
class ValueModel:
    Vxx_shared: np.ndarray  # (T_s + 1, nx, nx); the last entry is the summed branching value
    vx_shared: np.ndarray
    Vxx_branch: np.ndarray  # (d, T - T_s, nx, nx) for states T_s + 1 .. T
    vx_branch: np.ndarray


@dataclass
class LocalModels:
    """Quadratized AL objective and linearized dynamics about a tree."""

    A_shared: np.ndarray
    B_shared: np.ndarray
    A_branch: np.ndarray
    B_branch: np.ndarray
    shared: QuadraticModel
    branch: QuadraticModel
    terminal_Hxx: np.ndarray
    terminal_gx: np.ndarray


@dataclass
class SolveStats:
    inner_iters: int = 0
    q_updates: int = 0
    line_search_failures: int = 0
    q_history: list = field(default_factory=list)


def _add_al(model: QuadraticModel, h, lam, mu, Jx, Ju) -> QuadraticModel:
    nx = Jx.shape[-1]
    J = np.concatenate([Jx, Ju], axis=-1)
    _, g, H = augmented_terms(h, lam, mu, J)
    return QuadraticModel(
        model.Hxx + H[..., :nx, :nx],
        model.Hxu + H[..., :nx, nx:],
        model.Huu + H[..., nx:, nx:],
        model.gx + g[..., :nx],
        model.gu + g[..., nx:],
        model.c,
    )


def build_local_models(problem: TreeProblem, tree: TrajectoryTree, q, cstate: ConstraintState) -> LocalModels:
    q = np.asarray(q, dtype=float)
    xb = tree.branch_stage_states()
    A_s, B_s = problem.linearize(tree.shared_states[:-1], tree.shared_inputs)
    A_b, B_b = problem.linearize(xb, tree.branch_inputs)
    m_shared, m_branch, (tHxx, tgx, _) = problem.cost_models(tree)
    h, Jx, Ju = problem.constraint_jacobians(tree)
    lam, mu = cstate.lam, cstate.mu
    shared = _add_al(m_shared, h.shared, lam.shared, mu, Jx.shared, Ju[0])
    branch = _add_al(m_branch.scaled(q[:, None]), h.branch, lam.branch, mu, Jx.branch, Ju[1])
    _, tg, tH = augmented_terms(h.terminal, lam.terminal, mu, Jx.terminal)
    return LocalModels(
        A_s, B_s, A_b, B_b, shared, branch, q[:, None, None] * tHxx + tH, q[:, None] * tgx + tg
    )


def _branch_recursion(A, B, m: QuadraticModel, tHxx, tgx, reg):
    """Leaf-to-branching-node recursion for a stack of branches (leading dim = branch)."""
    out = run_chain(A, B, m, tgx, tHxx, reg)
    if out is None:
        raise RegularizationNeeded(f"Q_uu + {reg:g} I not positive definite on a branch")
    K, d, vx_h, Vxx_h, dV = out
    return K, d, vx_h[:, -1], Vxx_h[:, -1], Vxx_h[:, :-1], vx_h[:, :-1], dV[:, 0], dV[:, 1]


def _slice_model(m: QuadraticModel, i: int) -> QuadraticModel:
    s = slice(i, i + 1)
    return QuadraticModel(m.Hxx[s], m.Hxu[s], m.Huu[s], m.gx[s], m.gu[s], m.c[s])


def backward_pass(models: LocalModels, reg: float = 0.0, parallel: bool = False, executor=None):
    """Riccati recursion from the leaves to the root.

    Returns ``(FeedbackLaw, ValueModel)``; raises ``RegularizationNeeded``
    when some Q_uu + reg I is not positive definite.
    """
    nb = models.A_branch.shape[0]
    if parallel and nb > 1:
        def one(i):
            return _branch_recursion(
                models.A_branch[i : i + 1],
                models.B_branch[i : i + 1],
                _slice_model(models.branch, i),
                models.terminal_Hxx[i : i + 1],
                models.terminal_gx[i : i + 1],
                reg,
            )

        if executor is None:
            with ThreadPoolExecutor(max_workers=nb) as pool:
                parts = list(pool.map(one, range(nb)))
        else:
            parts = list(executor.map(one, range(nb)))
        K_b, d_b, Vx_b, Vxx_b, Vxx_h, vx_h, dV1_b, dV2_b = (
            np.concatenate([p[j] for p in parts]) for j in range(8)
        )
    else:
        K_b, d_b, Vx_b, Vxx_b, Vxx_h, vx_h, dV1_b, dV2_b = _branch_recursion(
            models.A_branch, models.B_branch, models.branch, models.terminal_Hxx, models.terminal_gx, reg
        )

    # Sum branch values at the branching node in index order.
    Vx, Vxx = Vx_b[0].copy(), Vxx_b[0].copy()
    dV1, dV2 = float(dV1_b[0]), float(dV2_b[0])
    for i in range(1, nb):
        Vx = Vx + Vx_b[i]
        Vxx = Vxx + Vxx_b[i]
        dV1 += float(dV1_b[i])
        dV2 += float(dV2_b[i])

    m = models.shared
    shared_model = QuadraticModel(m.Hxx[None], m.Hxu[None], m.Huu[None], m.gx[None], m.gu[None], m.c[None])
    out = run_chain(models.A_shared[None], models.B_shared[None], shared_model, Vx[None], Vxx[None], reg)
    if out is None:
        raise RegularizationNeeded(f"Q_uu + {reg:g} I not positive definite on the shared segment")
    K_s, d_s, vx_h_s, Vxx_h_s, dV_s = (a[0] for a in out)
    dV1 += float(dV_s[0])
    dV2 += float(dV_s[1])
    # Reorder so that index t holds the value of shared state t.
    Vxx_s = np.concatenate([Vxx_h_s[-1:], Vxx_h_s[:-1]])
    vx_s = np.concatenate([vx_h_s[-1:], vx_h_s[:-1]])
    law = FeedbackLaw(K_s, d_s, K_b, d_b, dV1, dV2)
    return law, ValueModel(Vxx_s, vx_s, Vxx_h, vx_h)


def apply_law(problem: TreeProblem, tree: TrajectoryTree, law: FeedbackLaw, step: float) -> TrajectoryTree:
    """Closed-loop rollout ``u = u_old + step * d + K (x - x_old)`` through the nonlinear dynamics.

    Problems may supply a faster ``rollout_law(tree, law, step)`` with the same result.
    """
    fast = getattr(problem, "rollout_law", None)
    if fast is not None:
        return fast(tree, law, step)
    Ts, nb, Tb = tree.split_step, tree.num_branches, tree.branch_length
    xs = np.empty_like(tree.shared_states)
    us = np.empty_like(tree.shared_inputs)
    x = tree.shared_states[0].copy()
    xs[0] = x
    for t in range(Ts):
        u = tree.shared_inputs[t] + step * law.d_shared[t] + law.K_shared[t] @ (x - tree.shared_states[t])
        us[t] = u
        x = problem.dynamics(x, u)
        xs[t + 1] = x
    xb_old = tree.branch_stage_states()
    xb = np.empty_like(tree.branch_states)
    ub = np.empty_like(tree.branch_inputs)
    x = np.broadcast_to(xs[-1], (nb, xs.shape[1]))
    for k in range(Tb):
        dx = x - xb_old[:, k]
        u = tree.branch_inputs[:, k] + step * law.d_branch[:, k] + (law.K_branch[:, k] @ dx[..., None])[..., 0]
        ub[:, k] = u
        x = problem.dynamics(x, u)
        xb[:, k] = x
    return TrajectoryTree(xs, us, xb, ub)


@dataclass
class CostBreakdown:
    total: float  # objective plus AL terms
    objective: float  # J^0 + sum_i q_i J^i
    shared: float
    branch: np.ndarray  # J^i
    h: TreeArrays
    al: float = 0.0

    def reweighted(self, q) -> "CostBreakdown":
        """Same tree, different branch weights (no re-evaluation needed)."""
        objective = self.shared + float(np.asarray(q, dtype=float) @ self.branch)
        return CostBreakdown(objective + self.al, objective, self.shared, self.branch, self.h, self.al)


def evaluate(problem: TreeProblem, tree: TrajectoryTree, q, cstate: ConstraintState) -> CostBreakdown:
    q = np.asarray(q, dtype=float)
    c = problem.costs(tree)
    J0 = float(np.sum(c.shared))
    Ji = np.sum(c.branch, axis=1) + c.terminal
    objective = J0 + float(q @ Ji)
    h = problem.constraints(tree)
    lam, mu = cstate.lam, cstate.mu
    al = (
        float(np.sum(augmented_cost(h.shared, lam.shared, mu)))
        + float(np.sum(augmented_cost(h.branch, lam.branch, mu)))
        + float(np.sum(augmented_cost(h.terminal, lam.terminal, mu)))
    )
    return CostBreakdown(objective + al, objective, J0, Ji, h, al)


def forward_pass(
    problem: TreeProblem,
    tree: TrajectoryTree,
    law: FeedbackLaw,
    q,
    cstate: ConstraintState,
    settings: SolverSettings,
    old: CostBreakdown | None = None,
):
    """Backtracking line search along the feedback law.

    Returns ``(new_tree, new_breakdown, step, accepted)``. A law with no
    expected decrease leaves the tree unchanged and counts as accepted.
    """
    if old is None:
        old = evaluate(problem, tree, q, cstate)
    if law.expected_change(1.0) >= 0.0:
        return tree, old, 0.0, True
    step = 1.0
    for _ in range(settings.line_search_max_steps):
        with np.errstate(all="ignore"):
            candidate = apply_law(problem, tree, law, step)
        if np.all(np.isfinite(candidate.shared_states)) and np.all(np.isfinite(candidate.branch_states)):
            with np.errstate(all="ignore"):
                new = evaluate(problem, candidate, q, cstate)
            if np.isfinite(new.total) and new.total <= old.total + settings.line_search_c * law.expected_change(step):
                return candidate, new, step, True
        step *= settings.line_search_beta
    return tree, old, 0.0, False


def resolve_ascent_parameters(settings: SolverSettings, branch_costs) -> tuple[float, float]:
    """Absolute (gamma, rho0), scaling unset ones to the magnitude of ``branch_costs``."""
    scale = max(float(np.max(np.abs(branch_costs))) if np.size(branch_costs) else 0.0, 1e-6)
    gamma = settings.gamma if settings.gamma is not None else settings.gamma_rel / scale
    rho0 = settings.rho0 if settings.rho0 is not None else settings.rho_rel * scale
    if gamma * rho0 >= 1.0:
        raise ValueError(f"gamma * rho0 = {gamma * rho0} must stay below 1")
    return gamma, rho0


def minmax_ilqr_tree(
    problem: TreeProblem,
    tree: TrajectoryTree,
    p: ProbabilityVector,
    q: ProbabilityVector,
    cstate: ConstraintState,
    settings: SolverSettings,
    gamma: float,
    rho0: float,
    stats: SolveStats | None = None,
    executor=None,
):
    """Interleave iLQR descent on the tree with ascent steps on ``q``.

    Returns ``(tree, q, converged)``; ``q`` moves only after accepted forward
    passes. ``stats.q_updates`` is the index into the diminishing rho schedule.
    """
    stats = stats if stats is not None else SolveStats()
    aset = AmbiguitySet(p, settings.alpha)
    reg = 0.0
    current = evaluate(problem, tree, q, cstate)
    for _ in range(settings.max_inner_iters):
        stats.inner_iters += 1
        models = build_local_models(problem, tree, q, cstate)
        # A non-PD Q_uu (e.g. a branch whose weight q_i dropped to zero) is
        # handled within the iteration by escalating the regularization.
        law = None
        while law is None:
            try:
                law, _ = backward_pass(models, reg, settings.parallel_branches, executor)
            except RegularizationNeeded:
                reg = max(reg * settings.hessian_reg_scale, settings.hessian_reg_init)
                if reg > settings.hessian_reg_max:
                    log.debug("regularization exceeded %.1e, giving up", settings.hessian_reg_max)
                    return tree, q, False
        new_tree, new, _, accepted = forward_pass(problem, tree, law, q, cstate, settings, current)
        if not accepted:
            stats.line_search_failures += 1
            reg = max(reg * settings.hessian_reg_scale, settings.hessian_reg_init)
            if reg > settings.hessian_reg_max:
                log.debug("regularization exceeded %.1e, giving up", settings.hessian_reg_max)
                return tree, q, False
            continue
        reg = reg / settings.hessian_reg_scale
        if reg < settings.hessian_reg_init:
            reg = 0.0

        decrease = current.total - new.total
        q_new = q
        if settings.risk_aware:
            # The schedule runs over the whole solve so rho never jumps back to rho0
            # at the start of an outer iteration.
            q_new = ascent_step(aset, q, new.branch, gamma, rho_schedule(rho0, stats.q_updates))
            stats.q_updates += 1
        dq = float(np.max(np.abs(q_new.values - q.values)))
        tree, q = new_tree, q_new
        stats.q_history.append(q.values.copy())
        current = new.reweighted(q) if dq > 0.0 else new
        if abs(decrease) < settings.cost_tolerance * max(1.0, abs(current.total)) and dq < settings.gradient_tolerance:
            return tree, q, True
    return tree, q, False


def solve(
    problem: TreeProblem,
    initial: TrajectoryTree,
    p: ProbabilityVector,
    settings: SolverSettings,
    q_init: ProbabilityVector | None = None,
) -> SolveResult:
    """Outer augmented-Lagrangian loop around :func:`minmax_ilqr_tree`.

    ``initial`` only supplies inputs; states are re-rolled from ``problem.x0``.
    Non-convergence is reported in the result, never raised.
    """
    t_start = time.perf_counter()
    if not isinstance(p, ProbabilityVector):
        p = ProbabilityVector(p)
    if len(p) != initial.num_branches:
        raise ValueError(f"{len(p)} probabilities for {initial.num_branches} branches")
    tree = build_tree(problem.x0, initial.shared_inputs, initial.branch_inputs, problem.dynamics)
    q = q_init if (q_init is not None and settings.risk_aware) else p
    start = evaluate(problem, tree, q, ConstraintState.zeros_like(problem.constraints(tree), settings.mu_init))
    cstate = ConstraintState.zeros_like(start.h, settings.mu_init)
    gamma, rho0 = resolve_ascent_parameters(settings, start.branch)
    stats = SolveStats()

    executor = ThreadPoolExecutor(max_workers=tree.num_branches) if settings.parallel_branches else None
    converged = False
    outer = 0
    try:
        for outer in range(1, settings.max_outer_iters + 1):
            tree, q, inner_ok = minmax_ilqr_tree(problem, tree, p, q, cstate, settings, gamma, rho0, stats, executor)
            h = problem.constraints(tree)
            violation = max_violation(h)
            log.debug("outer %d: inner converged=%s violation=%.3e mu=%.1e", outer, inner_ok, violation, cstate.mu)
            if inner_ok and violation <= settings.constraint_tolerance:
                converged = True
                break
            if outer < settings.max_outer_iters:
                cstate = update_multipliers(cstate, h, settings.mu_scale, settings.mu_max)
    finally:
        if executor is not None:
            executor.shutdown()

    final = evaluate(problem, tree, q, cstate)
    return SolveResult(
        tree=tree,
        q_final=q,
        converged=converged,
        outer_iters=outer,
        total_inner_iters=stats.inner_iters,
        final_cost=final.objective,
        max_constraint_violation=max_violation(final.h),
        solve_time=time.perf_counter() - t_start,
        branch_costs=final.branch,
        shared_cost=final.shared,
        q_history=stats.q_history,
    )
