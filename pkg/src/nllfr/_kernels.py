"""Compiled inner loops. Callers validate shapes; these do not."""

import numba
import numpy as np


@numba.njit(cache=True)
def nllfr_sim(A, Bu, Bw, Cy, Cz, Dyu, Dyw, expo, beta, u, x0):
    """Closed-loop NL-LFR recursion with ``w = beta.T @ phi(z)``.

    ``expo`` is (n_phi, n_z) integer exponents over the full z vector.
    Returns (bad, x, y, z, w, x_end); ``bad`` is the first index with a
    non-finite value, or -1.
    """
    T = u.shape[0]
    nx = A.shape[0]
    nu = Bu.shape[1]
    nw = Bw.shape[1]
    ny = Cy.shape[0]
    nz = Cz.shape[0]
    nphi = expo.shape[0]
    x = np.empty((T, nx))
    y = np.empty((T, ny))
    z = np.empty((T, nz))
    w = np.empty((T, nw))
    xc = x0.copy()
    xn = np.empty(nx)
    phi = np.empty(nphi)
    for n in range(T):
        for i in range(nx):
            x[n, i] = xc[i]
        for i in range(nz):
            s = 0.0
            for j in range(nx):
                s += Cz[i, j] * xc[j]
            z[n, i] = s
        for p in range(nphi):
            v = 1.0
            for l in range(nz):
                e = expo[p, l]
                if e != 0:
                    v *= z[n, l] ** e
            phi[p] = v
        for i in range(nw):
            s = 0.0
            for p in range(nphi):
                s += beta[p, i] * phi[p]
            w[n, i] = s
        for i in range(ny):
            s = 0.0
            for j in range(nx):
                s += Cy[i, j] * xc[j]
            for j in range(nu):
                s += Dyu[i, j] * u[n, j]
            for j in range(nw):
                s += Dyw[i, j] * w[n, j]
            y[n, i] = s
        ok = True
        for i in range(nx):
            s = 0.0
            for j in range(nx):
                s += A[i, j] * xc[j]
            for j in range(nu):
                s += Bu[i, j] * u[n, j]
            for j in range(nw):
                s += Bw[i, j] * w[n, j]
            xn[i] = s
            if not np.isfinite(s):
                ok = False
        if not ok:
            return n, x, y, z, w, xc
        for i in range(nx):
            xc[i] = xn[i]
    return -1, x, y, z, w, xc


@numba.njit(cache=True)
def linear_recursion(F, G, v, x0):
    """``x(n+1) = F x(n) + G v(n)``; returns (bad, x[0..T-1], x_end)."""
    T = v.shape[0]
    nx = F.shape[0]
    nv = G.shape[1]
    x = np.empty((T, nx))
    xc = x0.copy()
    xn = np.empty(nx)
    for n in range(T):
        for i in range(nx):
            x[n, i] = xc[i]
        ok = True
        for i in range(nx):
            s = 0.0
            for j in range(nx):
                s += F[i, j] * xc[j]
            for j in range(nv):
                s += G[i, j] * v[n, j]
            xn[i] = s
            if not np.isfinite(s):
                ok = False
        if not ok:
            return n, x, xc
        for i in range(nx):
            xc[i] = xn[i]
    return -1, x, xc


@numba.njit(cache=True)
def rk4_zoh(f, p, u, x0, h, substeps, C, D):
    """RK4 with the input held constant over each sample interval."""
    T = u.shape[0]
    nx = x0.shape[0]
    ny = C.shape[0]
    nu = u.shape[1]
    y = np.empty((T, ny))
    xs = np.empty((T, nx))
    x = x0.copy()
    for n in range(T):
        un = u[n]
        for i in range(nx):
            xs[n, i] = x[i]
        for i in range(ny):
            s = 0.0
            for j in range(nx):
                s += C[i, j] * x[j]
            for j in range(nu):
                s += D[i, j] * un[j]
            y[n, i] = s
        for _ in range(substeps):
            k1 = f(x, un, p)
            k2 = f(x + 0.5 * h * k1, un, p)
            k3 = f(x + 0.5 * h * k2, un, p)
            k4 = f(x + h * k3, un, p)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for i in range(nx):
            if not np.isfinite(x[i]):
                return n, y, xs, x
    return -1, y, xs, x


@numba.njit(cache=True)
def rk4_fine(f, p, u_fine, x0, h, substeps, C, D):
    """RK4 with a smooth input tabulated at half-step resolution.

    ``u_fine[2*substeps*n + j]`` is the input at ``t = (n + j/(2*substeps)) Ts``;
    the row just past the end is taken from index 0 (periodic supply).
    """
    m = 2 * substeps
    T = u_fine.shape[0] // m
    L = u_fine.shape[0]
    nx = x0.shape[0]
    ny = C.shape[0]
    nu = u_fine.shape[1]
    y = np.empty((T, ny))
    xs = np.empty((T, nx))
    x = x0.copy()
    for n in range(T):
        base = m * n
        for i in range(nx):
            xs[n, i] = x[i]
        for i in range(ny):
            s = 0.0
            for j in range(nx):
                s += C[i, j] * x[j]
            for j in range(nu):
                s += D[i, j] * u_fine[base, j]
            y[n, i] = s
        for q in range(substeps):
            i0 = base + 2 * q
            ua = u_fine[i0]
            ub = u_fine[i0 + 1]
            uc = u_fine[(i0 + 2) % L]
            k1 = f(x, ua, p)
            k2 = f(x + 0.5 * h * k1, ub, p)
            k3 = f(x + 0.5 * h * k2, ub, p)
            k4 = f(x + h * k3, uc, p)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        for i in range(nx):
            if not np.isfinite(x[i]):
                return n, y, xs, x
    return -1, y, xs, x
