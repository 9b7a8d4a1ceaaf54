"""CVaR ambiguity set, its Euclidean projection and the regularized ascent step.

The ambiguity set of CVaR at level ``alpha`` around a nominal distribution
``p`` is the simplex intersected with the box ``0 <= q_i <= p_i / alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ProbabilityVector

BISECTION_RESIDUAL_TOL = 1e-10
BISECTION_INTERVAL_TOL = 1e-12
_MAX_BISECTIONS = 200


@dataclass(frozen=True)
class AmbiguitySet:
    p: ProbabilityVector
    alpha: float

    def __post_init__(self):
        if not isinstance(self.p, ProbabilityVector):
            object.__setattr__(self, "p", ProbabilityVector(self.p))
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def d(self) -> int:
        return len(self.p)

    @property
    def upper(self) -> np.ndarray:
        """Per-branch cap p_i / alpha; the sum constraint makes 1 a safe cap at alpha = 0."""
        if self.alpha == 0.0:
            return np.ones(self.d)
        return np.minimum(self.p.values / self.alpha, 1.0)

    def contains(self, q, tol: float = 1e-9) -> bool:
        q = np.asarray(q, dtype=float)
        return bool(
            q.shape == (self.d,)
            and abs(q.sum() - 1.0) <= tol
            and np.all(q >= -tol)
            and np.all(q <= self.upper + tol)
        )


def _mass_residual(q_raw: np.ndarray, upper: np.ndarray, phi: float) -> float:
    return float(np.clip(q_raw - phi, 0.0, upper).sum() - 1.0)


def project(aset: AmbiguitySet, q_raw) -> ProbabilityVector:
    """Euclidean projection onto the ambiguity set.

    Bisects the non-increasing residual ``m(phi) = sum(clip(q - phi, 0, cap)) - 1``
    on the bracket ``[min(q) - 1, max(q)]`` and clamps ``q - phi*`` into the box.
    """
    q_raw = np.asarray(q_raw, dtype=float)
    if q_raw.shape != (aset.d,):
        raise ValueError(f"expected a vector of length {aset.d}, got shape {q_raw.shape}")
    if not np.all(np.isfinite(q_raw)):
        raise ValueError("cannot project a non-finite vector")
    upper = aset.upper

    lo, hi = float(q_raw.min()) - 1.0, float(q_raw.max())
    phi = lo
    for _ in range(_MAX_BISECTIONS):
        phi = 0.5 * (lo + hi)
        m = _mass_residual(q_raw, upper, phi)
        if abs(m) <= BISECTION_RESIDUAL_TOL:
            break
        if m > 0.0:
            lo = phi
        else:
            hi = phi
        if hi - lo <= BISECTION_INTERVAL_TOL:
            phi = 0.5 * (lo + hi)
            break

    q = np.clip(q_raw - phi, 0.0, upper)
    total = q.sum()
    if total != 1.0:
        # Spread the residual mass over coordinates that still have room.
        slack = (upper - q) if total < 1.0 else q
        room = slack.sum()
        if room > 0.0:
            q = q + (1.0 - total) * slack / room
        q = np.clip(q, 0.0, upper)
    return ProbabilityVector(q)


def rho_schedule(rho0: float, k: int) -> float:
    """Diminishing regularization weight rho0 / (k + 1)."""
    if k < 0:
        raise ValueError("iteration count must be non-negative")
    return rho0 / (k + 1)


def ascent_step(
    aset: AmbiguitySet,
    q: ProbabilityVector,
    branch_costs,
    gamma: float,
    rho_k: float,
) -> ProbabilityVector:
    """Projected gradient ascent on ``sum_i q_i J_i - rho/2 ||q||^2``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    if rho_k < 0:
        raise ValueError("rho_k must be non-negative")
    if gamma * rho_k >= 1.0:
        raise ValueError(f"gamma * rho_k = {gamma * rho_k} must stay below 1")
    costs = np.asarray(branch_costs, dtype=float)
    raw = (1.0 - gamma * rho_k) * np.asarray(q, dtype=float) + gamma * costs
    return project(aset, raw)


def cvar_value(aset: AmbiguitySet, branch_costs) -> tuple[float, ProbabilityVector]:
    """Worst-case expectation over the ambiguity set, solved exactly.

    Greedy filling: walk the branches from the most to the least expensive
    and give each as much mass as its cap allows. Ties go to the lower index.
    """
    costs = np.asarray(branch_costs, dtype=float)
    if costs.shape != (aset.d,):
        raise ValueError(f"expected {aset.d} branch costs, got shape {costs.shape}")
    order = np.argsort(-costs, kind="stable")
    upper = aset.upper
    q = np.zeros(aset.d)
    remaining = 1.0
    for i in order:
        take = min(upper[i], remaining)
        q[i] = take
        remaining -= take
        if remaining <= 0.0:
            break
    if remaining > 0.0:
        # Only reachable through rounding in the caps.
        q[order[0]] += remaining
    q_star = ProbabilityVector(q / q.sum())
    return float(q_star.values @ costs), q_star
