"""Sampling behavior planner producing the reference tree and initial guess.

Candidate trajectories come from forward-simulating the bicycle under a PD
speed controller and a pure-pursuit steering controller for a set of desired
speeds. Per joint behavior mode the best candidate is picked by a simple
score; the selection criteria are placeholders meant to be tuned per
deployment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import vehicle
from .core import NX, TrajectoryTree
from .costs import ego_center
from .vehicle import BicycleParams


class Path:
    """Polyline with arc-length parametrization, extended linearly past both ends."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("path needs at least two 2-D points")
        seg = np.diff(pts, axis=0)
        seg_len = np.linalg.norm(seg, axis=1)
        keep = np.concatenate([[True], seg_len > 1e-9])
        pts = pts[keep]
        if pts.shape[0] < 2:
            raise ValueError("path is degenerate")
        self.points = pts
        self.seg = np.diff(pts, axis=0)
        self.seg_len = np.linalg.norm(self.seg, axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.s[-1])

    def project(self, xy) -> float:
        """Arc length of the closest point (extension segments included)."""
        xy = np.asarray(xy, dtype=float)
        rel = xy - self.points[:-1]
        t = np.sum(rel * self.seg, axis=1) / self.seg_len**2
        t_cl = np.clip(t, 0.0, 1.0)
        # Allow running off either end along the first / last segment.
        t_cl[0] = min(t[0], 1.0)
        t_cl[-1] = max(t[-1], 0.0) if len(t) > 1 else t[0]
        foot = self.points[:-1] + t_cl[:, None] * self.seg
        k = int(np.argmin(np.linalg.norm(foot - xy, axis=1)))
        return float(self.s[k] + t_cl[k] * self.seg_len[k])

    def point(self, s: float) -> np.ndarray:
        if s <= 0.0:
            return self.points[0] + s * self.seg[0] / self.seg_len[0]
        if s >= self.length:
            return self.points[-1] + (s - self.length) * self.seg[-1] / self.seg_len[-1]
        k = int(np.searchsorted(self.s, s, side="right") - 1)
        return self.points[k] + (s - self.s[k]) / self.seg_len[k] * self.seg[k]

    def heading(self, s: float) -> float:
        k = int(np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg) - 1))
        return float(np.arctan2(self.seg[k, 1], self.seg[k, 0]))


@dataclass(frozen=True)
class TrackingGains:
    kp: float = 1.0
    kd: float = 0.3
    lookahead_time: float = 0.8
    min_lookahead: float = 3.0


@dataclass(frozen=True)
class SelectionWeights:
    progress: float = 1.0
    proximity: float = 5.0
    comfort: float = 0.1
    safe_distance: float = 6.0


@dataclass
class Sample:
    desired_speed: float
    states: np.ndarray  # (N + 1, nx)
    inputs: np.ndarray  # (N, nu)


def _wrap(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi


def simulate_tracking(
    x0, path: Path, desired_speed: float, steps: int, params: BicycleParams, gains: TrackingGains = TrackingGains()
) -> Sample:
    """Forward-simulate PD speed control and pure-pursuit steering."""
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((steps + 1, NX))
    inputs = np.empty((steps, 2))
    states[0] = x
    dt = params.dt
    err_prev = desired_speed - x[3]
    for k in range(steps):
        v = x[3]
        err = desired_speed - v
        a = gains.kp * err + gains.kd * (err - err_prev) / dt
        err_prev = err
        a_prev, d_prev = x[4], x[5]
        a = np.clip(a, a_prev + params.a_rate_bounds[0] * dt, a_prev + params.a_rate_bounds[1] * dt)
        a = np.clip(a, *params.a_bounds)
        # Keep the next speed inside the speed limits.
        a = np.clip(a, (params.v_bounds[0] - v) / dt, (params.v_bounds[1] - v) / dt)

        lookahead = max(gains.min_lookahead, gains.lookahead_time * v)
        s = path.project(x[:2])
        target = path.point(s + lookahead)
        angle = _wrap(np.arctan2(target[1] - x[1], target[0] - x[0]) - x[2])
        ld = max(np.hypot(*(target - x[:2])), 1e-6)
        delta = np.arctan2(2.0 * params.wheelbase * np.sin(angle), ld)
        delta = np.clip(delta, d_prev + params.delta_rate_bounds[0] * dt, d_prev + params.delta_rate_bounds[1] * dt)
        delta = np.clip(delta, *params.delta_bounds)

        u = np.array([a, delta])
        inputs[k] = u
        x = vehicle.step(x, u, params)
        states[k + 1] = x
    return Sample(float(desired_speed), states, inputs)


def sample_trajectories(
    x0, path, desired_speeds, params: BicycleParams, steps: int, gains: TrackingGains = TrackingGains()
) -> list[Sample]:
    """One forward-simulated candidate per desired speed."""
    speeds = list(desired_speeds)
    if not speeds:
        raise ValueError("need at least one desired speed")
    if any(v < 0 for v in speeds):
        raise ValueError("desired speeds must be non-negative")
    if not isinstance(path, Path):
        path = Path(path)
    return [simulate_tracking(x0, path, v, steps, params, gains) for v in speeds]


def score_sample(sample: Sample, obstacles: np.ndarray, weights: SelectionWeights, center_offset: float, best_progress: float) -> float:
    """Progress deficit + proximity penalty + comfort; ``obstacles`` is (N + 1, M, 3)."""
    xs = sample.states
    n = min(len(xs), obstacles.shape[0])
    progress = float(np.sum(np.linalg.norm(np.diff(xs[:, :2], axis=0), axis=1)))
    score = weights.progress * (best_progress - progress)
    if obstacles.shape[1]:
        centers = ego_center(xs[:n], center_offset)
        dist = np.linalg.norm(centers[:, None, :] - obstacles[:n, :, :2], axis=-1)
        score += weights.proximity * float(np.sum(np.maximum(0.0, weights.safe_distance - dist) ** 2))
    score += weights.comfort * float(np.sum(sample.inputs**2))
    return score


def select_reference_tree(
    x0,
    path,
    samples: list[Sample],
    mode_obstacles: np.ndarray,
    params: BicycleParams,
    split_step: int,
    weights: SelectionWeights = SelectionWeights(),
    center_offset: float = 1.35,
    gains: TrackingGains = TrackingGains(),
) -> tuple[TrajectoryTree, TrajectoryTree]:
    """Assemble the reference tree and initial guess from the best candidate per joint mode.

    The shared segment follows the most conservative selected candidate
    (lowest speed at the split step). Past the split, each branch references
    its own candidate, so branches disagree exactly where the modes call for
    different behavior. The initial guess re-simulates every candidate's
    desired speed from the common branching state, which makes it an exact
    rollout.

    Returns:
        ``(ref_tree, init_tree)``: reference states and inputs, and the
        initial-guess tree. Both share the conservative shared segment.
    """
    if not samples:
        raise ValueError("need at least one sample")
    if not isinstance(path, Path):
        path = Path(path)
    steps = samples[0].inputs.shape[0]
    if not 1 <= split_step < steps:
        raise ValueError(f"split_step must lie in [1, {steps - 1}]")
    chosen = choose_samples(samples, mode_obstacles, weights, center_offset)
    shared_src = min(chosen, key=lambda s: (s.states[split_step, 3], s.desired_speed))
    shared_states = shared_src.states[: split_step + 1].copy()
    shared_inputs = shared_src.inputs[:split_step].copy()
    ref_tree = TrajectoryTree(
        shared_states,
        shared_inputs,
        np.stack([s.states[split_step + 1 :] for s in chosen]),
        np.stack([s.inputs[split_step:] for s in chosen]),
    )
    init_states, init_inputs = [], []
    for s in chosen:
        tail = simulate_tracking(shared_states[-1], path, s.desired_speed, steps - split_step, params, gains)
        init_states.append(tail.states[1:])
        init_inputs.append(tail.inputs)
    init_tree = TrajectoryTree(shared_states.copy(), shared_inputs.copy(), np.stack(init_states), np.stack(init_inputs))
    return ref_tree, init_tree


def choose_samples(
    samples: list[Sample], mode_obstacles, weights: SelectionWeights = SelectionWeights(), center_offset: float = 1.35
) -> list[Sample]:
    """Lowest-score candidate for each joint mode; ``mode_obstacles`` is (d, N + 1, M, 3)."""
    if not samples:
        raise ValueError("need at least one sample")
    best_progress = max(float(np.sum(np.linalg.norm(np.diff(s.states[:, :2], axis=0), axis=1))) for s in samples)
    chosen = []
    for obs in mode_obstacles:
        scores = [score_sample(s, obs, weights, center_offset, best_progress) for s in samples]
        chosen.append(samples[int(np.argmin(scores))])
    return chosen


@dataclass
class Corridor:
    """Half-planes ``+-n . (p - p_ref) <= half_width`` per node."""

    points: np.ndarray  # (..., 2)
    normals: np.ndarray  # (..., 2)
    half_width: float

    def evaluate(self, xy) -> np.ndarray:
        lateral = np.sum(self.normals * (np.asarray(xy, dtype=float) - self.points), axis=-1)
        return np.stack([lateral - self.half_width, -lateral - self.half_width], axis=-1)


def build_corridor(ref_states, half_width: float) -> Corridor:
    """Corridor around reference poses (..., >= 3) of fixed half width."""
    if not half_width > 0:
        raise ValueError("half_width must be positive")
    ref = np.asarray(ref_states, dtype=float)
    theta = ref[..., 2]
    normals = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    return Corridor(ref[..., :2].copy(), normals, float(half_width))
