"""Tracking, comfort and proximity costs written as sums of squared residuals.

Every cost is ``sum(r**2)`` for a residual vector ``r(x, u)``; the quadratic
model uses the Gauss-Newton Hessian ``2 J^T J`` and gradient ``2 J^T r``, so
the Hessian is positive semidefinite by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NU, NX

NZ = NX + NU


@dataclass(frozen=True)
class CostWeights:
    """Weights of the stage and terminal costs.

    ``center_offset`` places the ego center used by the proximity cost ahead
    of the rear axle along the heading.
    """

    w_pos: float = 1.0
    w_heading: float = 1.0
    w_speed: float = 1.0
    w_a: float = 0.5
    w_delta: float = 5.0
    w_da: float = 0.02
    w_ddelta: float = 1.0
    w_saf: float = 20.0
    d_prox: float = 6.0
    center_offset: float = 1.35
    terminal_scale: float = 1.0

    def __post_init__(self):
        for name in ("w_pos", "w_heading", "w_speed", "w_a", "w_delta", "w_da", "w_ddelta", "w_saf"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.d_prox > 0:
            raise ValueError("d_prox must be > 0")
        if self.terminal_scale < 0:
            raise ValueError("terminal_scale must be >= 0")


@dataclass
class QuadraticModel:
    """Local model ``c + g^T dz + 1/2 dz^T H dz`` with ``z = (x, u)``; arrays may be batched."""

    Hxx: np.ndarray
    Hxu: np.ndarray
    Huu: np.ndarray
    gx: np.ndarray
    gu: np.ndarray
    c: np.ndarray

    def hessian(self) -> np.ndarray:
        top = np.concatenate([self.Hxx, self.Hxu], axis=-1)
        bottom = np.concatenate([np.swapaxes(self.Hxu, -1, -2), self.Huu], axis=-1)
        return np.concatenate([top, bottom], axis=-2)

    def gradient(self) -> np.ndarray:
        return np.concatenate([self.gx, self.gu], axis=-1)

    def scaled(self, w) -> "QuadraticModel":
        w = np.asarray(w, dtype=float)
        wm = w[..., None, None]
        wv = w[..., None]
        return QuadraticModel(self.Hxx * wm, self.Hxu * wm, self.Huu * wm, self.gx * wv, self.gu * wv, self.c * w)


def ego_center(x: np.ndarray, offset: float) -> np.ndarray:
    """Geometric center of the ego footprint, (..., 2)."""
    theta = x[..., 2]
    return np.stack([x[..., 0] + offset * np.cos(theta), x[..., 1] + offset * np.sin(theta)], axis=-1)


def _tracking_sqrt(weights: CostWeights, scale: float = 1.0) -> np.ndarray:
    return np.sqrt(scale * np.array([weights.w_pos, weights.w_pos, weights.w_heading, weights.w_speed]))


def _linear_part(weights: CostWeights, dt: float) -> np.ndarray:
    """Constant Jacobian of the tracking, input and rate residuals w.r.t. z."""
    sw = _tracking_sqrt(weights)
    J = np.zeros((8, NZ))
    J[np.arange(4), np.arange(4)] = sw
    J[4, 6] = np.sqrt(weights.w_a)
    J[5, 7] = np.sqrt(weights.w_delta)
    ra, rd = np.sqrt(weights.w_da) / dt, np.sqrt(weights.w_ddelta) / dt
    J[6, 6], J[6, 4] = ra, -ra
    J[7, 7], J[7, 5] = rd, -rd
    return J


def _safety_residuals(x, obstacles, weights):
    """Residuals sqrt(w_saf) * max(0, d_prox - d) and their Jacobians w.r.t. (px, py, theta)."""
    c = ego_center(x, weights.center_offset)
    diff = c[..., None, :] - obstacles  # (..., M, 2)
    dist = np.sqrt(np.sum(diff**2, axis=-1))
    active = dist < weights.d_prox
    sw = np.sqrt(weights.w_saf)
    r = np.where(active, sw * (weights.d_prox - dist), 0.0)
    safe = np.where(dist > 0.0, dist, 1.0)
    unit = diff / safe[..., None]
    theta = x[..., 2]
    dc_dtheta = weights.center_offset * np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    jac = np.empty(r.shape + (3,))
    jac[..., 0] = unit[..., 0]
    jac[..., 1] = unit[..., 1]
    jac[..., 2] = np.sum(unit * dc_dtheta[..., None, :], axis=-1)
    jac *= np.where(active, -sw, 0.0)[..., None]
    return r, jac


def _linear_residuals(x, u, ref, weights, dt):
    sw = _tracking_sqrt(weights)
    r = np.empty(x.shape[:-1] + (8,))
    r[..., :4] = sw * (x[..., :4] - ref[..., :4])
    r[..., 4] = np.sqrt(weights.w_a) * u[..., 0]
    r[..., 5] = np.sqrt(weights.w_delta) * u[..., 1]
    r[..., 6] = np.sqrt(weights.w_da) * (u[..., 0] - x[..., 4]) / dt
    r[..., 7] = np.sqrt(weights.w_ddelta) * (u[..., 1] - x[..., 5]) / dt
    return r


def _as_obstacles(obstacles, batch_shape):
    if obstacles is None:
        return np.zeros(batch_shape + (0, 2))
    obs = np.asarray(obstacles, dtype=float)
    if obs.ndim == 1:
        obs = obs[None]
    return np.broadcast_to(obs, batch_shape + obs.shape[-2:])


def stage_cost(x, u, ref_point, obstacles, weights: CostWeights, dt: float = 0.1):
    """Stage cost; ``obstacles`` holds predicted centers, shape (..., M, 2)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    ref = np.asarray(ref_point, dtype=float)
    obs = _as_obstacles(obstacles, x.shape[:-1])
    r = _linear_residuals(x, u, ref, weights, dt)
    r_saf, _ = _safety_residuals(x, obs, weights)
    return np.sum(r**2, axis=-1) + np.sum(r_saf**2, axis=-1)


def safety_cost(x, obstacles, weights: CostWeights):
    x = np.asarray(x, dtype=float)
    r_saf, _ = _safety_residuals(x, _as_obstacles(obstacles, x.shape[:-1]), weights)
    return np.sum(r_saf**2, axis=-1)


def terminal_cost(x, ref_point, weights: CostWeights):
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref_point, dtype=float)
    sw = _tracking_sqrt(weights, weights.terminal_scale)
    r = sw * (x[..., :4] - ref[..., :4])
    return np.sum(r**2, axis=-1)


def quadratize(x, u, ref_point, obstacles, weights: CostWeights, dt: float = 0.1) -> QuadraticModel:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    ref = np.asarray(ref_point, dtype=float)
    batch = x.shape[:-1]
    obs = _as_obstacles(obstacles, batch)

    J_lin = _linear_part(weights, dt)
    r_lin = _linear_residuals(x, u, ref, weights, dt)
    r_saf, j_saf = _safety_residuals(x, obs, weights)

    H = np.broadcast_to(2.0 * J_lin.T @ J_lin, batch + (NZ, NZ)).copy()
    g = 2.0 * r_lin @ J_lin
    # Safety residuals only touch (px, py, theta).
    H[..., :3, :3] += 2.0 * np.einsum("...mi,...mj->...ij", j_saf, j_saf)
    g[..., :3] += 2.0 * np.einsum("...m,...mi->...i", r_saf, j_saf)
    c = np.sum(r_lin**2, axis=-1) + np.sum(r_saf**2, axis=-1)
    return QuadraticModel(H[..., :NX, :NX], H[..., :NX, NX:], H[..., NX:, NX:], g[..., :NX], g[..., NX:], c)


def quadratize_terminal(x, ref_point, weights: CostWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Terminal model as ``(Hxx, gx, c)``."""
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref_point, dtype=float)
    sw = _tracking_sqrt(weights, weights.terminal_scale)
    batch = x.shape[:-1]
    Hxx = np.zeros(batch + (NX, NX))
    idx = np.arange(4)
    Hxx[..., idx, idx] = 2.0 * sw**2
    gx = np.zeros(batch + (NX,))
    gx[..., :4] = 2.0 * sw**2 * (x[..., :4] - ref[..., :4])
    return Hxx, gx, terminal_cost(x, ref, weights)
