"""Continuous-time ground truth: RK4 integration of the benchmark ODEs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numba
import numpy as np

from . import _kernels
from .errors import InstabilityError, TransientError
from .excite import MultisineDataset, draw_phases, multisine, nrmse

# true parameters of the two case studies
DUFFING_TRUE = {"m": 1.0, "c": 2.0, "k": 100.0, "k3": 500.0}
CHAIN2DOF_TRUE = {
    "m1": 2.0, "m2": 1.0, "c1": 5.0, "c2": 2.0, "k1": 800.0, "k2": 600.0,
    "alpha1": 7.0, "alpha2": 3.0, "alpha3": 5.0e4,
}


@numba.njit(cache=True)
def _duffing_rhs(x, u, p):
    m, c, k, k3 = p[0], p[1], p[2], p[3]
    return np.array([x[1], (u[0] - c * x[1] - k * x[0] - k3 * x[0] ** 3) / m])


@numba.njit(cache=True)
def _chain2dof_rhs(x, u, p):
    m1, m2, c1, c2, k1, k2 = p[0], p[1], p[2], p[3], p[4], p[5]
    a1, a2, a3 = p[6], p[7], p[8]
    x1, x2, v1, v2 = x[0], x[1], x[2], x[3]
    f = a1 * np.tanh(a2 * v1) + a3 * x1 ** 3
    acc1 = (-k1 * x1 - c1 * v1 - k2 * (x1 - x2) - c2 * (v1 - v2) - f) / m1
    acc2 = (u[0] - k2 * (x2 - x1) - c2 * (v2 - v1)) / m2
    return np.array([v1, v2, acc1, acc2])


@dataclass(frozen=True, eq=False)
class OdeSystem:
    """``xdot = rhs(x, u, params)`` with linear read-out ``y0 = C x + D u``.

    ``rhs`` should be a numba-jitted function for speed; a plain Python
    callable also works through a slower loop.
    """

    name: str
    n_x: int
    n_u: int
    rhs: Callable = field(repr=False)
    params: np.ndarray
    C: np.ndarray
    D: np.ndarray

    @property
    def n_y(self):
        return self.C.shape[0]

    def energy(self, x):
        """Mechanical energy for the built-in Duffing system only."""
        if self.name != "duffing":
            raise NotImplementedError(self.name)
        m, _, k, k3 = self.params
        return 0.5 * m * x[..., 1] ** 2 + 0.5 * k * x[..., 0] ** 2 + 0.25 * k3 * x[..., 0] ** 4


def duffing_system(m=1.0, c=2.0, k=100.0, k3=500.0):
    return OdeSystem("duffing", 2, 1, _duffing_rhs, np.array([m, c, k, k3], dtype=float),
                     np.array([[1.0, 0.0]]), np.zeros((1, 1)))


def chain2dof_system(m1=2.0, m2=1.0, c1=5.0, c2=2.0, k1=800.0, k2=600.0,
                     alpha1=7.0, alpha2=3.0, alpha3=5.0e4):
    p = np.array([m1, m2, c1, c2, k1, k2, alpha1, alpha2, alpha3], dtype=float)
    return OdeSystem("chain2dof", 4, 1, _chain2dof_rhs, p,
                     np.array([[0.0, 1.0, 0.0, 0.0]]), np.zeros((1, 1)))


class Rk4Result(NamedTuple):
    y: np.ndarray
    x: np.ndarray
    x_end: np.ndarray


def _rk4_python(sys, u, x0, h, substeps, fine):
    m = 2 * substeps
    T = len(u) // m if fine else len(u)
    y = np.empty((T, sys.n_y))
    xs = np.empty((T, sys.n_x))
    x = x0.copy()
    f, p = sys.rhs, sys.params
    for n in range(T):
        xs[n] = x
        y[n] = sys.C @ x + sys.D @ (u[m * n] if fine else u[n])
        for q in range(substeps):
            if fine:
                ua, ub, uc = u[m * n + 2 * q], u[m * n + 2 * q + 1], u[(m * n + 2 * q + 2) % len(u)]
            else:
                ua = ub = uc = u[n]
            k1 = f(x, ua, p)
            k2 = f(x + 0.5 * h * k1, ub, p)
            k3 = f(x + 0.5 * h * k2, ub, p)
            k4 = f(x + h * k3, uc, p)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            return n, y, xs, x
    return -1, y, xs, x


def rk4_simulate(sys, u, Ts, x0=None, substeps=16, fine=False):
    """Integrate ``sys`` over len(u) samples with classical RK4.

    By default ``u`` holds one value per sample, applied through a
    zero-order hold. With ``fine=True``, ``u`` is tabulated at half-step
    resolution (``2 * substeps`` values per sample, see
    :func:`excite.multisine` with ``oversample``) and the input varies within
    each interval.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    x0 = np.zeros(sys.n_x) if x0 is None else np.asarray(x0, dtype=float).copy()
    h = Ts / substeps
    args = (sys.params, np.ascontiguousarray(u), x0, h, int(substeps), sys.C, sys.D)
    if isinstance(sys.rhs, numba.core.registry.CPUDispatcher):
        kernel = _kernels.rk4_fine if fine else _kernels.rk4_zoh
        bad, y, xs, x_end = kernel(sys.rhs, *args)
    else:
        bad, y, xs, x_end = _rk4_python(sys, u, x0, h, substeps, fine)
    if bad >= 0:
        raise InstabilityError(f"{sys.name}: RK4 diverged at sample {bad}", index=int(bad))
    return Rk4Result(y, xs, x_end)


def steady_state_data(sys, design, R, P, rng, settle_periods=3, substeps=16,
                      smooth_input=False, max_settle=48, periodicity_tol=0.01):
    """Noise-free steady-state records of ``R`` random-phase realizations.

    Each realization is integrated for ``settle_periods`` periods, which are
    discarded, and then ``P`` periods are kept. If the kept response is not
    periodic to ``periodicity_tol`` percent NRMSE the settling time is
    doubled (up to ``max_settle`` periods). ``smooth_input`` drives the ODE
    with the continuous multisine instead of its zero-order hold.
    """
    if settle_periods < 1:
        raise ValueError("settle_periods must be >= 1")
    N = design.N
    os_ = 2 * substeps if smooth_input else 1
    u_out = np.empty((R, P, N, sys.n_u))
    y_out = np.empty((R, P, N, sys.n_y))
    for r in range(R):
        phases = draw_phases(design, rng)
        u = multisine(design, phases)[:, None]
        u_sim = multisine(design, phases, oversample=os_)[:, None] if smooth_input else u
        x = np.zeros(sys.n_x)
        settled, extra = 0, settle_periods
        while True:
            res = rk4_simulate(sys, np.tile(u_sim, (extra, 1)), design.Ts, x,
                               substeps, fine=smooth_input)
            settled += extra
            prev = res.y[-N:]
            keep = rk4_simulate(sys, np.tile(u_sim, (P, 1)), design.Ts, res.x_end,
                                substeps, fine=smooth_input)
            yk = keep.y.reshape(P, N, sys.n_y)
            ref = yk[-2] if P >= 2 else prev
            err = nrmse(yk[-1], ref)
            if err <= periodicity_tol:
                break
            if 2 * settled > max_settle:
                raise TransientError(
                    f"{sys.name}: realization {r} not periodic after {settled} settle "
                    f"periods (inter-period NRMSE {err:.3g}%); increase settle_periods"
                )
            x, extra = keep.x_end, settled
        u_out[r] = u[None]
        y_out[r] = yk
    return MultisineDataset(
        u=u_out, y=y_out, fs=design.fs, lines=design.lines,
        input_names=("force",), output_names=("displacement",),
        input_units=("N",), output_units=("m",),
        meta={"source": "synthetic", "system": sys.name,
              "settle_periods": settle_periods, "smooth_input": bool(smooth_input)},
    )
