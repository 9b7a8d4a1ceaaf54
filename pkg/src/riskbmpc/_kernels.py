"""Compiled inner loops of the backward pass.

The per-node matrices are tiny (6x6, 6x2), so a numpy Riccati step is
dominated by call overhead; these loops run the whole chain per branch.
"""

from __future__ import annotations

import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True)
def _cholesky_solve(M, R, out):
    """Solve M X = R for symmetric M via Cholesky; returns False if M is not PD."""
    n = M.shape[0]
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = M[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not s > 0.0:
                    return False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    m = R.shape[1]
    for c in range(m):
        y = np.empty(n)
        for i in range(n):
            s = R[i, c]
            for k in range(i):
                s -= L[i, k] * y[k]
            y[i] = s / L[i, i]
        for i in range(n - 1, -1, -1):
            s = y[i]
            for k in range(i + 1, n):
                s -= L[k, i] * out[k, c]
            out[i, c] = s / L[i, i]
    return True


@nb.njit(cache=True, nogil=True, inline="always")
def _mm(a, b):
    """a @ b with plain loops (BLAS call overhead dominates at these sizes)."""
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            if aip != 0.0:
                for j in range(m):
                    out[i, j] += aip * b[p, j]
    return out


@nb.njit(cache=True, nogil=True, inline="always")
def _tmm(a, b):
    """a.T @ b."""
    k, n = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for p in range(k):
        for i in range(n):
            api = a[p, i]
            if api != 0.0:
                for j in range(m):
                    out[i, j] += api * b[p, j]
    return out


@nb.njit(cache=True, nogil=True, inline="always")
def _tmv(a, v):
    """a.T @ v."""
    k, n = a.shape
    out = np.zeros(n)
    for p in range(k):
        for i in range(n):
            out[i] += a[p, i] * v[p]
    return out


@nb.njit(cache=True, nogil=True, inline="always")
def _mv(a, v):
    n, k = a.shape
    out = np.zeros(n)
    for i in range(n):
        for p in range(k):
            out[i] += a[i, p] * v[p]
    return out


@nb.njit(cache=True, nogil=True)
def riccati_chain(A, B, Hxx, Hxu, Huu, gx, gu, Vx_end, Vxx_end, reg, K, d, Vx_hist, Vxx_hist, dV):
    """Backward recursion along ``nb`` independent chains of length ``T``.

    Shapes: A (nb, T, nx, nx), B (nb, T, nx, nu), models (nb, T, ...),
    terminal value (nb, nx) / (nb, nx, nx). Fills ``K, d``, the value at each
    chain node before its step (``Vx_hist[:, t]`` is the value of state t + 1)
    and ``dV[:, 0:2]`` (linear / quadratic expected-change terms). The value
    at the chain start is written to ``Vx_hist[:, T]``, ``Vxx_hist[:, T]``.
    Returns False when some regularized Q_uu is not positive definite.
    """
    n_chains, T, nx, nu = B.shape
    for c in range(n_chains):
        Vx = Vx_end[c].copy()
        Vxx = Vxx_end[c].copy()
        dv1 = 0.0
        dv2 = 0.0
        for t in range(T - 1, -1, -1):
            Vx_hist[c, t] = Vx
            Vxx_hist[c, t] = Vxx
            At = A[c, t]
            Bt = B[c, t]
            VA = _mm(Vxx, At)
            VB = _mm(Vxx, Bt)
            Qx = gx[c, t] + _tmv(At, Vx)
            Qu = gu[c, t] + _tmv(Bt, Vx)
            Qxx = Hxx[c, t] + _tmm(At, VA)
            Quu = Huu[c, t] + _tmm(Bt, VB)
            Qux = Hxu[c, t].T + _tmm(Bt, VA)
            Qreg = Quu.copy()
            for i in range(nu):
                Qreg[i, i] += reg
            rhs = np.empty((nu, nx + 1))
            rhs[:, :nx] = Qux
            rhs[:, nx] = Qu
            sol = np.empty((nu, nx + 1))
            if not _cholesky_solve(Qreg, rhs, sol):
                return False
            Kt = -sol[:, :nx]
            dt = -sol[:, nx]
            K[c, t] = Kt
            d[c, t] = dt
            Quu_d = _mv(Quu, dt)
            Vx = Qx + _tmv(Kt, Quu_d) + _tmv(Kt, Qu) + _tmv(Qux, dt)
            QuuK = _mm(Quu, Kt)
            Vxx = Qxx + _tmm(Kt, QuuK) + _tmm(Kt, Qux) + _tmm(Qux, Kt)
            Vxx = 0.5 * (Vxx + Vxx.T)
            for i in range(nu):
                dv1 += dt[i] * Qu[i]
                dv2 += dt[i] * Quu_d[i]
        Vx_hist[c, T] = Vx
        Vxx_hist[c, T] = Vxx
        dV[c, 0] = dv1
        dV[c, 1] = dv2
    return True


def run_chain(A, B, m, Vx_end, Vxx_end, reg):
    """Allocate outputs and run :func:`riccati_chain`; ``None`` on a non-PD Q_uu."""
    n_chains, T, nx, nu = B.shape
    K = np.empty((n_chains, T, nu, nx))
    d = np.empty((n_chains, T, nu))
    Vx_hist = np.empty((n_chains, T + 1, nx))
    Vxx_hist = np.empty((n_chains, T + 1, nx, nx))
    dV = np.zeros((n_chains, 2))
    c = np.ascontiguousarray
    ok = riccati_chain(
        c(A), c(B), c(m.Hxx), c(m.Hxu), c(m.Huu), c(m.gx), c(m.gu),
        c(Vx_end), c(Vxx_end), float(reg), K, d, Vx_hist, Vxx_hist, dV,
    )
    if not ok:
        return None
    return K, d, Vx_hist, Vxx_hist, dV


@nb.njit(cache=True, nogil=True)
def _bicycle(x, u, dt, L, out):
    th = x[2]
    v = x[3]
    out[0] = x[0] + dt * v * np.cos(th)
    out[1] = x[1] + dt * v * np.sin(th)
    out[2] = th + dt * v / L * np.tan(u[1])
    out[3] = v + dt * u[0]
    out[4] = u[0]
    out[5] = u[1]


@nb.njit(cache=True, nogil=True)
def bicycle_law_rollout(xs_old, us_old, K_s, d_s, xb_old, ub_old, K_b, d_b, step, dt, L, xs, us, xb, ub):
    """Roll ``u = u_old + step d + K (x - x_old)`` through the bicycle over a tree.

    ``xb_old`` holds the branch stage states (d, Tb, nx) starting at the
    branching state; ``xb`` receives states T_s + 1 .. T.
    """
    Ts = us_old.shape[0]
    nb_, Tb, nu = ub_old.shape
    nx = xs_old.shape[1]
    xs[0] = xs_old[0]
    dx = np.empty(nx)
    for t in range(Ts):
        for i in range(nx):
            dx[i] = xs[t, i] - xs_old[t, i]
        for j in range(nu):
            s = us_old[t, j] + step * d_s[t, j]
            for i in range(nx):
                s += K_s[t, j, i] * dx[i]
            us[t, j] = s
        _bicycle(xs[t], us[t], dt, L, xs[t + 1])
    for b in range(nb_):
        x = xs[Ts].copy()
        for k in range(Tb):
            for i in range(nx):
                dx[i] = x[i] - xb_old[b, k, i]
            for j in range(nu):
                s = ub_old[b, k, j] + step * d_b[b, k, j]
                for i in range(nx):
                    s += K_b[b, k, j, i] * dx[i]
                ub[b, k, j] = s
            _bicycle(x, ub[b, k], dt, L, xb[b, k])
            x = xb[b, k].copy()
