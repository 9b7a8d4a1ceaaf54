"""Domain types shared across the planner: states, trajectory trees, settings."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

# Augmented state layout: [px, py, theta, v, a_prev, delta_prev].
NX = 6
NU = 2
PX, PY, THETA, V, A_PREV, DELTA_PREV = range(NX)
ACC, STEER = range(NU)

Dynamics = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class VehicleState:
    px: float
    py: float
    theta: float
    v: float

    def to_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta, self.v], dtype=float)


@dataclass(frozen=True)
class ControlInput:
    a: float = 0.0
    delta: float = 0.0

    def to_array(self) -> np.ndarray:
        return np.array([self.a, self.delta], dtype=float)


@dataclass(frozen=True)
class AugmentedState:
    """Vehicle state concatenated with the control applied one step earlier."""

    base: VehicleState
    prev_control: ControlInput = field(default_factory=ControlInput)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.base.to_array(), self.prev_control.to_array()])

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "AugmentedState":
        x = np.asarray(x, dtype=float)
        if x.shape != (NX,):
            raise ValueError(f"augmented state must have shape ({NX},), got {x.shape}")
        return cls(VehicleState(*map(float, x[:4])), ControlInput(*map(float, x[4:])))


class ProbabilityVector:
    """A point of the probability simplex."""

    TOL = 1e-9

    def __init__(self, values: Sequence[float]):
        arr = np.array(values, dtype=float).reshape(-1)
        if arr.size == 0:
            raise ValueError("probability vector must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("probability vector has non-finite entries")
        if np.any(arr < 0.0):
            raise ValueError(f"probability vector has negative entries: {arr}")
        if abs(arr.sum() - 1.0) > self.TOL:
            raise ValueError(f"probability vector sums to {arr.sum()!r}, not 1")
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def uniform(cls, d: int) -> "ProbabilityVector":
        return cls(np.full(d, 1.0 / d))

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __array__(self, dtype=None, copy=None):
        return self._values.astype(dtype) if dtype is not None else self._values.copy()

    def __len__(self) -> int:
        return self._values.size

    def __iter__(self):
        return iter(self._values.tolist())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProbabilityVector):
            return NotImplemented
        return np.array_equal(self._values, other._values)

    def __repr__(self) -> str:
        return f"ProbabilityVector({self._values.tolist()})"


@dataclass
class TrajectoryTree:
    """Shared segment of ``split_step`` inputs followed by ``num_branches`` branches.

    The branching-node state ``shared_states[-1]`` is stored once; every branch
    starts from it, so the equality of branching states holds structurally.

    Attributes:
        shared_states: (T_s + 1, nx) states x_0 .. x_{T_s}.
        shared_inputs: (T_s, nu) inputs u_0 .. u_{T_s - 1}.
        branch_states: (d, T - T_s, nx) states x^i_{T_s + 1} .. x^i_T.
        branch_inputs: (d, T - T_s, nu) inputs u^i_{T_s} .. u^i_{T - 1}.
    """

    shared_states: np.ndarray
    shared_inputs: np.ndarray
    branch_states: np.ndarray
    branch_inputs: np.ndarray

    @property
    def num_branches(self) -> int:
        return self.branch_inputs.shape[0]

    @property
    def split_step(self) -> int:
        return self.shared_inputs.shape[0]

    @property
    def horizon(self) -> int:
        return self.split_step + self.branch_inputs.shape[1]

    @property
    def branch_length(self) -> int:
        return self.branch_inputs.shape[1]

    @property
    def x0(self) -> np.ndarray:
        return self.shared_states[0]

    @property
    def branching_state(self) -> np.ndarray:
        return self.shared_states[-1]

    def branch_stage_states(self) -> np.ndarray:
        """States paired with branch inputs: (d, T - T_s, nx), starting at x_{T_s}."""
        d = self.num_branches
        head = np.broadcast_to(self.branching_state, (d, 1, self.shared_states.shape[1]))
        return np.concatenate([head, self.branch_states[:, :-1]], axis=1)

    def terminal_states(self) -> np.ndarray:
        return self.branch_states[:, -1]

    def branch_path(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Full (T + 1, nx) state and (T, nu) input sequence of branch ``i``."""
        xs = np.concatenate([self.shared_states, self.branch_states[i]])
        us = np.concatenate([self.shared_inputs, self.branch_inputs[i]])
        return xs, us

    def copy(self) -> "TrajectoryTree":
        return TrajectoryTree(
            self.shared_states.copy(),
            self.shared_inputs.copy(),
            self.branch_states.copy(),
            self.branch_inputs.copy(),
        )

    def select(self, branches: Sequence[int]) -> "TrajectoryTree":
        idx = list(branches)
        return TrajectoryTree(
            self.shared_states.copy(),
            self.shared_inputs.copy(),
            self.branch_states[idx].copy(),
            self.branch_inputs[idx].copy(),
        )

    def to_dict(self) -> dict:
        return {
            "split_step": self.split_step,
            "horizon": self.horizon,
            "num_branches": self.num_branches,
            "shared_states": self.shared_states.tolist(),
            "shared_inputs": self.shared_inputs.tolist(),
            "branch_states": self.branch_states.tolist(),
            "branch_inputs": self.branch_inputs.tolist(),
        }


def rollout(x0: np.ndarray, inputs: np.ndarray, dynamics: Dynamics) -> np.ndarray:
    """Propagate a batch of input sequences; ``inputs`` has shape (..., N, nu).

    Returns states of shape (..., N, nx) excluding the start state.
    """
    inputs = np.asarray(inputs, dtype=float)
    x = np.broadcast_to(np.asarray(x0, dtype=float), inputs.shape[:-2] + np.shape(x0)[-1:])
    out = np.empty(inputs.shape[:-1] + x.shape[-1:])
    for k in range(inputs.shape[-2]):
        x = dynamics(x, inputs[..., k, :])
        out[..., k, :] = x
    return out


def build_tree(
    x0: np.ndarray | AugmentedState,
    shared: np.ndarray,
    branches: np.ndarray | Sequence[np.ndarray],
    dynamics: Dynamics,
) -> TrajectoryTree:
    """Roll the nonlinear dynamics out over an input tree.

    Args:
        x0: initial augmented state.
        shared: (T_s, nu) shared inputs.
        branches: d sequences of (T - T_s, nu) branch inputs.
        dynamics: batched transition ``f(x, u)``.
    """
    if isinstance(x0, AugmentedState):
        x0 = x0.to_array()
    x0 = np.asarray(x0, dtype=float)
    shared = np.atleast_2d(np.asarray(shared, dtype=float))
    branch_list = [np.atleast_2d(np.asarray(b, dtype=float)) for b in branches]
    if shared.shape[0] < 1:
        raise ValueError("shared segment needs at least one input")
    if not branch_list:
        raise ValueError("tree needs at least one branch")
    shapes = {b.shape for b in branch_list}
    if len(shapes) != 1:
        raise ValueError(f"branch input sequences differ in shape: {sorted(shapes)}")
    branch_inputs = np.stack(branch_list)
    if branch_inputs.shape[1] < 1:
        raise ValueError("each branch needs at least one input")
    if branch_inputs.shape[2] != shared.shape[1]:
        raise ValueError("branch and shared inputs differ in dimension")

    shared_states = np.concatenate([x0[None], rollout(x0, shared, dynamics)])
    branch_states = rollout(shared_states[-1], branch_inputs, dynamics)
    return TrajectoryTree(shared_states, shared.copy(), branch_states, branch_inputs)


@dataclass(frozen=True)
class SolverSettings:
    """Numerical settings of the min-max AL-iLQR tree solver.

    ``gamma`` and ``rho0`` are absolute; when left as ``None`` they are scaled
    to the magnitude of the initial branch costs (``gamma_rel / J``,
    ``rho_rel * J``), which keeps ``gamma * rho0 = gamma_rel * rho_rel``.
    """

    max_outer_iters: int = 10
    max_inner_iters: int = 100
    cost_tolerance: float = 1e-4
    constraint_tolerance: float = 1e-3
    gradient_tolerance: float = 1e-4
    mu_init: float = 1.0
    mu_scale: float = 10.0
    mu_max: float = 1e6
    line_search_beta: float = 0.5
    line_search_c: float = 1e-4
    line_search_max_steps: int = 10
    hessian_reg_init: float = 1e-6
    hessian_reg_scale: float = 10.0
    hessian_reg_max: float = 1e8
    gamma: float | None = None
    rho0: float | None = None
    gamma_rel: float = 5.0
    rho_rel: float = 0.18
    alpha: float = 0.6
    risk_aware: bool = True
    parallel_branches: bool = False

    def __post_init__(self):
        positive_counts = ("max_outer_iters", "max_inner_iters", "line_search_max_steps")
        for name in positive_counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        positive = (
            "cost_tolerance",
            "constraint_tolerance",
            "gradient_tolerance",
            "mu_init",
            "mu_max",
            "hessian_reg_init",
            "hessian_reg_max",
            "gamma_rel",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not self.mu_scale > 1:
            raise ValueError("mu_scale must be > 1")
        if not self.hessian_reg_scale > 1:
            raise ValueError("hessian_reg_scale must be > 1")
        for name in ("line_search_beta", "line_search_c"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.rho0 is not None and self.rho0 < 0:
            raise ValueError("rho0 must be >= 0")
        if self.rho_rel < 0:
            raise ValueError("rho_rel must be >= 0")
        if self.gamma is not None and self.rho0 is not None and not self.gamma * self.rho0 < 1:
            raise ValueError(f"gamma * rho0 = {self.gamma * self.rho0} must stay below 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def with_(self, **changes) -> "SolverSettings":
        return replace(self, **changes)


@dataclass
class SolveResult:
    tree: TrajectoryTree
    q_final: ProbabilityVector
    converged: bool
    outer_iters: int
    total_inner_iters: int
    final_cost: float
    max_constraint_violation: float
    solve_time: float
    branch_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    shared_cost: float = 0.0
    q_history: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "converged": self.converged,
            "outer_iters": self.outer_iters,
            "total_inner_iters": self.total_inner_iters,
            "final_cost": self.final_cost,
            "max_constraint_violation": self.max_constraint_violation,
            "solve_time": self.solve_time,
            "q_final": self.q_final.values.tolist(),
            "shared_cost": self.shared_cost,
            "branch_costs": np.asarray(self.branch_costs).tolist(),
        }

    def to_dict(self) -> dict:
        out = self.summary()
        out["tree"] = self.tree.to_dict()
        return out
