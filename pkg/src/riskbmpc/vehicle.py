"""Kinematic bicycle on the augmented state, explicit Euler discretization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import NU, NX


@dataclass(frozen=True)
class BicycleParams:
    """Physical limits and discretization of the ego vehicle.

    Attributes:
        wheelbase: rear-to-front axle distance L in meters.
        dt: integration and planning step in seconds.
        v_bounds: speed limits (m/s).
        a_bounds: acceleration limits (m/s^2).
        delta_bounds: steering-angle limits (rad).
        a_rate_bounds: jerk limits (m/s^3).
        delta_rate_bounds: steering-rate limits (rad/s).
    """

    wheelbase: float = 2.7
    dt: float = 0.1
    v_bounds: tuple[float, float] = (0.0, 15.0)
    a_bounds: tuple[float, float] = (-6.0, 3.0)
    delta_bounds: tuple[float, float] = (-0.6, 0.6)
    a_rate_bounds: tuple[float, float] = (-10.0, 10.0)
    delta_rate_bounds: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if not self.wheelbase > 0:
            raise ValueError("wheelbase must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        for name in ("v_bounds", "a_bounds", "delta_bounds", "a_rate_bounds", "delta_rate_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: lower bound {lo} must be below upper bound {hi}")

    @property
    def input_lower(self) -> np.ndarray:
        return np.array([self.a_bounds[0], self.delta_bounds[0]])

    @property
    def input_upper(self) -> np.ndarray:
        return np.array([self.a_bounds[1], self.delta_bounds[1]])

    @property
    def rate_lower(self) -> np.ndarray:
        return np.array([self.a_rate_bounds[0], self.delta_rate_bounds[0]])

    @property
    def rate_upper(self) -> np.ndarray:
        return np.array([self.a_rate_bounds[1], self.delta_rate_bounds[1]])


def step(x: np.ndarray, u: np.ndarray, params: BicycleParams) -> np.ndarray:
    """One Euler step; ``x`` is (..., 6), ``u`` is (..., 2).

    No saturation is applied here, limits are the constraint model's job.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    dt, L = params.dt, params.wheelbase
    theta, v = x[..., 2], x[..., 3]
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (NX,)))
    out[..., 0] = x[..., 0] + dt * v * np.cos(theta)
    out[..., 1] = x[..., 1] + dt * v * np.sin(theta)
    out[..., 2] = theta + dt * v / L * np.tan(u[..., 1])
    out[..., 3] = v + dt * u[..., 0]
    out[..., 4:] = u
    return out


def linearize(x: np.ndarray, u: np.ndarray, params: BicycleParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic Jacobians ``A = d step / dx`` (..., 6, 6) and ``B = d step / du`` (..., 6, 2)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    dt, L = params.dt, params.wheelbase
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    theta, v, delta = x[..., 2], x[..., 3], u[..., 1]
    c, s = np.cos(theta), np.sin(theta)

    A = np.zeros(batch + (NX, NX))
    A[..., 0, 0] = 1.0
    A[..., 1, 1] = 1.0
    A[..., 2, 2] = 1.0
    A[..., 3, 3] = 1.0
    A[..., 0, 2] = -dt * v * s
    A[..., 0, 3] = dt * c
    A[..., 1, 2] = dt * v * c
    A[..., 1, 3] = dt * s
    A[..., 2, 3] = dt * np.tan(delta) / L

    B = np.zeros(batch + (NX, NU))
    B[..., 2, 1] = dt * v / (L * np.cos(delta) ** 2)
    B[..., 3, 0] = dt
    B[..., 4, 0] = 1.0
    B[..., 5, 1] = 1.0
    return A, B
