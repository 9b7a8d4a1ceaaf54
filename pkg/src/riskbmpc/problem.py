"""The vehicle branch-MPC problem in the form the tree solver consumes."""

from __future__ import annotations

import numpy as np

from . import _kernels
from . import constraints as cons
from .behavior import build_corridor
from . import costs, vehicle
from .constraints import ConstraintGeometry, NodeContext, TreeArrays
from .core import NU, NX, TrajectoryTree
from .costs import CostWeights


def _unique_trajectories(traj: np.ndarray) -> np.ndarray:
    """Distinct rows of ``traj`` (n, ...) in first-appearance order."""
    flat = traj.reshape(traj.shape[0], -1)
    _, first = np.unique(flat, axis=0, return_index=True)
    return traj[np.sort(first)]


def shared_obstacles(branch_obstacles: np.ndarray, split_step: int) -> np.ndarray:
    """Union over branches of each vehicle's distinct predictions on the shared segment.

    ``branch_obstacles`` is (d, T + 1, M, 3); the result is (T_s, M_s, 3).
    """
    segs = []
    for j in range(branch_obstacles.shape[2]):
        uniq = _unique_trajectories(branch_obstacles[:, :split_step, j])
        segs.extend(uniq)
    if not segs:
        return np.zeros((split_step, 0, 3))
    return np.stack(segs, axis=1)


class BranchPlanningProblem:
    """Ego planning problem over a trajectory tree.

    Args:
        x0: initial augmented state (6,).
        ref_tree: reference tree from the behavior planner (provides per-node
            reference states and the corridor centerline).
        branch_obstacles: (d, T + 1, M, 3) predicted poses of every surrounding
            vehicle under each branch's joint mode.
        params, weights, geometry: vehicle limits, cost weights, footprints.
    """

    nx = NX
    nu = NU

    def __init__(
        self,
        x0,
        ref_tree: TrajectoryTree,
        branch_obstacles: np.ndarray,
        params: vehicle.BicycleParams,
        weights: CostWeights,
        geometry: ConstraintGeometry,
    ):
        self.x0 = np.asarray(x0, dtype=float)
        self.ref_tree = ref_tree
        self.params = params
        self.weights = weights
        self.geometry = geometry
        Ts, d, Tb = ref_tree.split_step, ref_tree.num_branches, ref_tree.branch_length
        T = ref_tree.horizon
        obs = np.asarray(branch_obstacles, dtype=float)
        if obs.ndim != 4 or obs.shape[0] != d or obs.shape[1] < T + 1 or obs.shape[3] != 3:
            raise ValueError(f"branch_obstacles must be (d={d}, >=T+1={T + 1}, M, 3), got {obs.shape}")
        obs = obs[:, : T + 1]
        self.branch_obstacles = obs

        self.ref_shared = ref_tree.shared_states[:-1]
        self.ref_branch = ref_tree.branch_stage_states()
        self.ref_terminal = ref_tree.terminal_states()

        self.obs_shared = shared_obstacles(obs, Ts)
        self.obs_branch = obs[:, Ts:T]
        self.obs_terminal = obs[:, T]

        hw = geometry.corridor_half_width
        cs = build_corridor(self.ref_shared, hw)
        cb = build_corridor(self.ref_branch, hw)
        ct = build_corridor(self.ref_terminal, hw)
        active = np.ones(Ts, dtype=bool)
        active[0] = False  # x_0 is fixed
        self.ctx_shared = NodeContext(self.obs_shared, cs.points, cs.normals, active)
        self.ctx_branch = NodeContext(self.obs_branch, cb.points, cb.normals, np.ones((d, Tb), dtype=bool))
        self.ctx_terminal = NodeContext(self.obs_terminal, ct.points, ct.normals, np.ones(d, dtype=bool))

    @property
    def num_branches(self) -> int:
        return self.ref_tree.num_branches

    def dynamics(self, x, u):
        return vehicle.step(x, u, self.params)

    def linearize(self, x, u):
        return vehicle.linearize(x, u, self.params)

    def rollout_law(self, tree: TrajectoryTree, law, step: float) -> TrajectoryTree:
        """Compiled closed-loop rollout used by the solver's forward pass."""
        xs = np.empty_like(tree.shared_states)
        us = np.empty_like(tree.shared_inputs)
        xb = np.empty_like(tree.branch_states)
        ub = np.empty_like(tree.branch_inputs)
        c = np.ascontiguousarray
        _kernels.bicycle_law_rollout(
            c(tree.shared_states), c(tree.shared_inputs), c(law.K_shared), c(law.d_shared),
            c(tree.branch_stage_states()), c(tree.branch_inputs), c(law.K_branch), c(law.d_branch),
            float(step), self.params.dt, self.params.wheelbase, xs, us, xb, ub,
        )
        return TrajectoryTree(xs, us, xb, ub)

    def costs(self, tree: TrajectoryTree) -> TreeArrays:
        w, dt = self.weights, self.params.dt
        return TreeArrays(
            costs.stage_cost(tree.shared_states[:-1], tree.shared_inputs, self.ref_shared, self.obs_shared[..., :2], w, dt),
            costs.stage_cost(tree.branch_stage_states(), tree.branch_inputs, self.ref_branch, self.obs_branch[..., :2], w, dt),
            costs.terminal_cost(tree.terminal_states(), self.ref_terminal, w),
        )

    def cost_models(self, tree: TrajectoryTree):
        w, dt = self.weights, self.params.dt
        shared = costs.quadratize(tree.shared_states[:-1], tree.shared_inputs, self.ref_shared, self.obs_shared[..., :2], w, dt)
        branch = costs.quadratize(tree.branch_stage_states(), tree.branch_inputs, self.ref_branch, self.obs_branch[..., :2], w, dt)
        terminal = costs.quadratize_terminal(tree.terminal_states(), self.ref_terminal, w)
        return shared, branch, terminal

    def constraints(self, tree: TrajectoryTree) -> TreeArrays:
        g = self.geometry
        return TreeArrays(
            cons.eval_stage(tree.shared_states[:-1], tree.shared_inputs, self.ctx_shared, g, jacobians=False),
            cons.eval_stage(tree.branch_stage_states(), tree.branch_inputs, self.ctx_branch, g, jacobians=False),
            cons.eval_terminal(tree.terminal_states(), self.ctx_terminal, g, jacobians=False),
        )

    def constraint_jacobians(self, tree: TrajectoryTree):
        g = self.geometry
        hs, Jxs, Jus = cons.eval_stage(tree.shared_states[:-1], tree.shared_inputs, self.ctx_shared, g)
        hb, Jxb, Jub = cons.eval_stage(tree.branch_stage_states(), tree.branch_inputs, self.ctx_branch, g)
        ht, Jxt = cons.eval_terminal(tree.terminal_states(), self.ctx_terminal, g)
        return TreeArrays(hs, hb, ht), TreeArrays(Jxs, Jxb, Jxt), (Jus, Jub)

    def select(self, branches) -> "BranchPlanningProblem":
        idx = list(branches)
        return BranchPlanningProblem(
            self.x0,
            self.ref_tree.select(idx),
            self.branch_obstacles[idx],
            self.params,
            self.weights,
            self.geometry,
        )
