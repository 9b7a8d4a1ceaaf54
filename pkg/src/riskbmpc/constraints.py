"""Inequality constraints ``h(x, u) <= 0`` and their augmented-Lagrangian treatment.

Row layout of a stage node:
``[input bounds (4) | rate bounds (4) | speed bounds (2) | collision pairs | corridor (2)]``.
Terminal nodes carry only the state rows (speed, collision, corridor).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NU, NX
from .vehicle import BicycleParams

# Stand-in value for rows whose decision variables are fixed (initial state).
VACUOUS = -1.0


@dataclass(frozen=True)
class FootprintCircles:
    """Equal circles centered on the longitudinal axis of a vehicle.

    ``offsets`` are measured from the vehicle's reference point (rear axle for
    the ego, body center for surrounding vehicles) along its heading.
    """

    radius: float
    offsets: tuple[float, ...]
    rectangle: tuple[float, float, float] | None = None  # (x_min, x_max, width)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("circle radius must be positive")
        if len(self.offsets) < 1:
            raise ValueError("need at least one circle")
        if self.rectangle is not None and not self.covers(*self.rectangle):
            raise ValueError("circles do not cover the vehicle rectangle")

    @classmethod
    def covering(cls, length: float, width: float, n: int = 3, rear_extent: float | None = None) -> "FootprintCircles":
        """Smallest equal circles covering a ``length x width`` rectangle.

        ``rear_extent`` is the distance from the reference point back to the
        rear bumper; ``None`` puts the reference point at the body center.
        """
        if rear_extent is None:
            rear_extent = length / 2.0
        seg = length / n
        radius = float(np.hypot(seg / 2.0, width / 2.0)) * (1.0 + 1e-9)
        offsets = tuple(float(-rear_extent + seg * (k + 0.5)) for k in range(n))
        return cls(radius, offsets, (-rear_extent, length - rear_extent, width))

    def covers(self, x_min: float, x_max: float, width: float, samples: int = 200) -> bool:
        xs = np.linspace(x_min, x_max, samples)
        ys = np.linspace(-width / 2, width / 2, samples)
        boundary = np.concatenate(
            [
                np.stack([xs, np.full_like(xs, -width / 2)], 1),
                np.stack([xs, np.full_like(xs, width / 2)], 1),
                np.stack([np.full_like(ys, x_min), ys], 1),
                np.stack([np.full_like(ys, x_max), ys], 1),
            ]
        )
        centers = np.stack([np.asarray(self.offsets), np.zeros(len(self.offsets))], 1)
        dist = np.linalg.norm(boundary[:, None, :] - centers[None], axis=-1)
        return bool(np.all(dist.min(axis=1) <= self.radius + 1e-12))

    def centers(self, px, py, theta) -> np.ndarray:
        """Circle centers, shape (..., n_c, 2)."""
        off = np.asarray(self.offsets)
        c, s = np.cos(theta)[..., None], np.sin(theta)[..., None]
        return np.stack([np.asarray(px)[..., None] + off * c, np.asarray(py)[..., None] + off * s], axis=-1)


@dataclass(frozen=True)
class ConstraintGeometry:
    """Everything the constraint rows need that is not a decision variable."""

    params: BicycleParams
    ego: FootprintCircles
    other: FootprintCircles
    corridor_half_width: float = 2.0


@dataclass
class NodeContext:
    """Per-node data, batched over the leading dimensions.

    Attributes:
        obstacles: (..., M, 3) predicted surrounding-vehicle poses (x, y, heading).
        corridor_ref: (..., 2) reference point the corridor is centered on.
        corridor_normal: (..., 2) unit normal of the reference heading.
        state_active: (...) False where the state is fixed (initial node).
    """

    obstacles: np.ndarray
    corridor_ref: np.ndarray
    corridor_normal: np.ndarray
    state_active: np.ndarray


def num_stage_rows(n_obstacles: int, geom: ConstraintGeometry) -> int:
    return 2 * NU + 2 * NU + 2 + n_obstacles * len(geom.ego.offsets) * len(geom.other.offsets) + 2


def _collision(x, obstacles, geom: ConstraintGeometry, jacobians: bool = True):
    """Rows (r_ev + r_sv)^2 - ||c_i - c_j||^2 and their (px, py, theta) Jacobians."""
    ego = geom.ego.centers(x[..., 0], x[..., 1], x[..., 2])  # (..., ne, 2)
    sv = geom.other.centers(obstacles[..., 0], obstacles[..., 1], obstacles[..., 2])  # (..., M, ns, 2)
    diff = ego[..., None, :, None, :] - sv[..., :, None, :, :]  # (..., M, ne, ns, 2)
    R2 = (geom.ego.radius + geom.other.radius) ** 2
    h = R2 - np.sum(diff**2, axis=-1)
    batch = x.shape[:-1]
    if not jacobians:
        return h.reshape(batch + (-1,)), None
    theta = x[..., 2]
    off = np.asarray(geom.ego.offsets)
    dc = np.stack([-off * np.sin(theta)[..., None], off * np.cos(theta)[..., None]], axis=-1)  # (..., ne, 2)
    jac = np.empty(h.shape + (3,))
    jac[..., 0] = -2.0 * diff[..., 0]
    jac[..., 1] = -2.0 * diff[..., 1]
    jac[..., 2] = -2.0 * np.sum(diff * dc[..., None, :, None, :], axis=-1)
    return h.reshape(batch + (-1,)), jac.reshape(batch + (-1, 3))


def _state_rows(x, ctx: NodeContext, geom: ConstraintGeometry, jacobians: bool = True):
    """Speed, collision and corridor rows, with Jacobians w.r.t. x unless ``jacobians`` is False."""
    p = geom.params
    batch = x.shape[:-1]
    h_col, j_col = _collision(x, ctx.obstacles, geom, jacobians)
    n_col = h_col.shape[-1]
    m = 2 + n_col + 2
    h = np.empty(batch + (m,))
    h[..., 0] = x[..., 3] - p.v_bounds[1]
    h[..., 1] = p.v_bounds[0] - x[..., 3]
    h[..., 2 : 2 + n_col] = h_col
    lateral = np.sum(ctx.corridor_normal * (x[..., :2] - ctx.corridor_ref), axis=-1)
    w = geom.corridor_half_width
    h[..., -2] = lateral - w
    h[..., -1] = -lateral - w
    inactive = ~np.asarray(ctx.state_active, dtype=bool)
    if np.any(inactive):
        h[inactive] = VACUOUS
    if not jacobians:
        return h, None
    Jx = np.zeros(batch + (m, NX))
    Jx[..., 0, 3] = 1.0
    Jx[..., 1, 3] = -1.0
    Jx[..., 2 : 2 + n_col, :3] = j_col
    Jx[..., -2, :2] = ctx.corridor_normal
    Jx[..., -1, :2] = -ctx.corridor_normal
    if np.any(inactive):
        Jx[inactive] = 0.0
    return h, Jx


def eval_stage(x, u, ctx: NodeContext, geom: ConstraintGeometry, jacobians: bool = True):
    """Stage-node constraint values, and optionally Jacobians ``(Jx, Ju)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    p = geom.params
    batch = x.shape[:-1]
    h_state, Jx_state = _state_rows(x, ctx, geom, jacobians)
    m = 8 + h_state.shape[-1]
    h = np.empty(batch + (m,))
    lo, hi = p.input_lower, p.input_upper
    rlo, rhi = p.rate_lower, p.rate_upper
    rate = (u - x[..., 4:6]) / p.dt
    h[..., 0:2] = u - hi
    h[..., 2:4] = lo - u
    h[..., 4:6] = rate - rhi
    h[..., 6:8] = rlo - rate
    h[..., 8:] = h_state
    if not jacobians:
        return h
    Jx = np.zeros(batch + (m, NX))
    Ju = np.zeros(batch + (m, NU))
    eye = np.eye(NU)
    Ju[..., 0:2, :] = eye
    Ju[..., 2:4, :] = -eye
    Ju[..., 4:6, :] = eye / p.dt
    Ju[..., 6:8, :] = -eye / p.dt
    Jx[..., 4:6, 4:6] = -eye / p.dt
    Jx[..., 6:8, 4:6] = eye / p.dt
    Jx[..., 8:, :] = Jx_state
    return h, Jx, Ju


def eval_terminal(x, ctx: NodeContext, geom: ConstraintGeometry, jacobians: bool = True):
    h, Jx = _state_rows(np.asarray(x, dtype=float), ctx, geom, jacobians)
    return (h, Jx) if jacobians else h


def eval_constraints(x, u, ctx: NodeContext, geom: ConstraintGeometry) -> np.ndarray:
    """Constraint values of a stage node (``u`` given) or a terminal node (``u is None``)."""
    if u is None:
        return eval_terminal(x, ctx, geom, jacobians=False)
    return eval_stage(x, u, ctx, geom, jacobians=False)


def active_selector(h, lam, mu: float) -> np.ndarray:
    """Diagonal of I_mu: 0 where the row is strictly satisfied with zero multiplier, else mu."""
    h = np.asarray(h, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return np.where((h < 0.0) & (lam == 0.0), 0.0, mu)


def augmented_terms(h, lam, mu: float, jac: np.ndarray | None = None):
    """Cost ``lam^T h + 1/2 h^T I_mu h`` with Gauss-Newton gradient and Hessian.

    Without ``jac`` the derivatives are w.r.t. ``h`` itself; with a Jacobian of
    shape (..., m, n) they are chained to the n decision variables.
    """
    h = np.asarray(h, dtype=float)
    lam = np.asarray(lam, dtype=float)
    I = active_selector(h, lam, mu)
    cost = np.sum(lam * h + 0.5 * I * h * h, axis=-1)
    w = lam + I * h
    if jac is None:
        return cost, w, I
    grad = (w[..., None, :] @ jac)[..., 0, :]
    hess = np.swapaxes(jac * I[..., None], -1, -2) @ jac
    return cost, grad, hess


def augmented_cost(h, lam, mu: float) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    I = active_selector(h, lam, mu)
    return np.sum(lam * h + 0.5 * I * h * h, axis=-1)


@dataclass
class TreeArrays:
    """One array per node group of a trajectory tree."""

    shared: np.ndarray  # (T_s, ...)
    branch: np.ndarray  # (d, T - T_s, ...)
    terminal: np.ndarray  # (d, ...)

    def map(self, fn) -> "TreeArrays":
        return TreeArrays(fn(self.shared), fn(self.branch), fn(self.terminal))

    def copy(self) -> "TreeArrays":
        return self.map(np.copy)

    def max(self) -> float:
        return max((float(a.max()) for a in (self.shared, self.branch, self.terminal) if a.size), default=-np.inf)


@dataclass
class ConstraintState:
    """Multipliers per tree node and constraint row, and the shared penalty weight."""

    lam: TreeArrays
    mu: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError("penalty weight must be positive")
        for a in (self.lam.shared, self.lam.branch, self.lam.terminal):
            if np.any(a < 0):
                raise ValueError("multipliers must be non-negative")

    @classmethod
    def zeros_like(cls, h: TreeArrays, mu: float) -> "ConstraintState":
        return cls(h.map(np.zeros_like), mu)

    def copy(self) -> "ConstraintState":
        return ConstraintState(self.lam.copy(), self.mu)

    def select(self, branches) -> "ConstraintState":
        idx = list(branches)
        return ConstraintState(
            TreeArrays(self.lam.shared.copy(), self.lam.branch[idx].copy(), self.lam.terminal[idx].copy()), self.mu
        )


def update_multipliers(state: ConstraintState, h: TreeArrays, mu_scale: float, mu_max: float) -> ConstraintState:
    """``lam <- max(0, lam + mu h)`` per row, then ``mu <- min(mu * mu_scale, mu_max)``."""
    mu = state.mu

    def upd(lam, hv):
        return np.maximum(0.0, lam + mu * hv)

    lam = TreeArrays(
        upd(state.lam.shared, h.shared),
        upd(state.lam.branch, h.branch),
        upd(state.lam.terminal, h.terminal),
    )
    return ConstraintState(lam, min(mu * mu_scale, mu_max))


def max_violation(h: TreeArrays) -> float:
    return max(0.0, h.max())
