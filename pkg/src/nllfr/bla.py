"""Step I: nonparametric best linear approximation and the parametric fit of
the physical parameters to it."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import (
    ExcitationError,
    InitializationError,
    InsufficientDataError,
    NllfrError,
    OptimizationError,
)
from .lmopt import LeastSquaresProblem, LmConfig, lm_minimize
from .model import discretize, parametric_frm


@dataclass(frozen=True, eq=False)
class FrmEstimate:
    """Nonparametric FRM on the excited lines.

    ``G`` is (L, n_y, n_u); the variances are per entry and describe the
    uncertainty of ``G`` itself (variance of the mean). Either variance is
    None when the data hold no scatter to estimate it from.
    """

    lines: np.ndarray
    N: int
    fs: float
    G: np.ndarray
    var_total: np.ndarray | None = None
    var_noise: np.ndarray | None = None

    @property
    def freqs(self):
        return self.lines * self.fs / self.N

    @property
    def has_total(self):
        return self.var_total is not None

    @property
    def has_noise(self):
        return self.var_noise is not None

    def permuted(self, order):
        order = np.asarray(order)
        pick = lambda a: None if a is None else a[order]
        return FrmEstimate(self.lines[order], self.N, self.fs, self.G[order],
                           pick(self.var_total), pick(self.var_noise))


def _block_frm(U, Y):
    """Per-line Y U^-1 for one block of n_u experiments.

    U is (n_u_exp, L, n_u), Y is (n_u_exp, L, n_y); returns (L, n_y, n_u).
    """
    Um = np.transpose(U, (1, 2, 0))  # (L, n_u, exp)
    Ym = np.transpose(Y, (1, 2, 0))  # (L, n_y, exp)
    # G U = Y  ->  U^T G^T = Y^T
    Gt = np.linalg.solve(np.swapaxes(Um, 1, 2), np.swapaxes(Ym, 1, 2))
    return np.swapaxes(Gt, 1, 2)


def estimate_bla(ds):
    """G averaged over periods, then over realizations (blocks of n_u
    realizations in the multi-input case)."""
    R, P, N, nu = ds.R, ds.P, ds.N, ds.n_u
    if R < nu:
        raise InsufficientDataError(f"{nu} inputs need at least {nu} realizations, got {R}")
    lines = np.asarray(ds.lines)
    U = numkit.dft(ds.u, axis=2)[:, :, lines, :]  # (R, P, L, nu)
    Y = numkit.dft(ds.y, axis=2)[:, :, lines, :]
    mag = np.abs(U)
    peak = mag.max()
    low = np.argwhere(mag < 1e-12 * peak)
    if low.size:
        raise ExcitationError(f"input spectrum vanishes at excited line {lines[low[0][2]]}",
                              line=int(lines[low[0][2]]))
    n_blocks = R // nu
    Gb = np.empty((n_blocks, P) + (len(lines), ds.n_y, nu), dtype=complex)
    for b in range(n_blocks):
        sl = slice(b * nu, (b + 1) * nu)
        for p in range(P):
            Gb[b, p] = _block_frm(U[sl, p], Y[sl, p])
    G_r = Gb.mean(axis=1)
    G = G_r.mean(axis=0)
    var_noise = None
    if P > 1:
        var_noise = np.mean(np.var(Gb, axis=1, ddof=1), axis=0) / (n_blocks * P)
    var_total = None
    if n_blocks > 1:
        var_total = np.var(G_r, axis=0, ddof=1) / n_blocks
    return FrmEstimate(lines=lines.copy(), N=N, fs=ds.fs, G=G,
                       var_total=var_total, var_noise=var_noise)


def bla_weights(frm):
    """Entry-wise 1/sigma_total with a floor; ones when no variance exists."""
    if frm.var_total is None:
        return np.ones(frm.G.shape)
    sigma = np.sqrt(frm.var_total)
    floor = 1e-12 * np.median(sigma)
    sigma = np.maximum(sigma, floor if floor > 0 else 1e-300)
    return 1.0 / sigma


@dataclass
class BlaFit:
    theta: np.ndarray
    cost: float
    cost_init: float
    status: str
    n_iter: int
    grad_norm: float
    lm: object = field(repr=False, default=None)

    @property
    def converged(self):
        return self.status in ("gtol", "xtol")

    def report(self, names=None):
        names = names or [f"theta_{i}" for i in range(len(self.theta))]
        return {
            "theta": {n: float(v) for n, v in zip(names, self.theta)},
            "cost": float(self.cost), "cost_init": float(self.cost_init),
            "status": self.status, "iterations": int(self.n_iter),
            "grad_norm": float(self.grad_norm),
        }


def bla_residual_fn(frm, spec, Ts):
    # canonical line order makes the fit independent of how lines were listed
    order = np.argsort(frm.lines, kind="stable")
    lines = frm.lines[order]
    G = frm.G[order]
    W = bla_weights(frm)[order]
    scale = 1.0 / np.sqrt(len(lines))

    def residual(theta):
        dl = discretize(spec, theta, Ts)
        E = W * (G - parametric_frm(dl, lines, frm.N)) * scale
        return np.concatenate([E.real.ravel(), E.imag.ravel()])

    return residual


def fit_parametric_bla(frm, spec, theta0, Ts, max_iters=100, config=None):
    """Weighted frequency-domain least squares of theta_phys against the
    nonparametric BLA."""
    theta0 = np.asarray(theta0, dtype=float)
    if not spec.in_domain(theta0):
        raise InitializationError(f"theta0 outside the parameter domain: {theta0}")
    residual = bla_residual_fn(frm, spec, Ts)
    try:
        r0 = residual(theta0)
    except NllfrError as exc:
        raise InitializationError(f"BLA cost undefined at theta0: {exc}") from exc
    if not np.all(np.isfinite(r0)):
        raise InitializationError("BLA cost is not finite at theta0")
    cfg = config or LmConfig(max_iters=max_iters)
    problem = LeastSquaresProblem(residual, len(theta0), in_domain=spec.in_domain,
                                  scale=np.abs(theta0))
    try:
        res = lm_minimize(problem, theta0, cfg)
    except OptimizationError as exc:
        raise InitializationError(str(exc)) from exc
    return BlaFit(res.theta, res.cost, float(r0 @ r0), res.status, res.n_iter,
                  res.grad_norm, res)


def random_restart_init(nominal, fraction, count, rng):
    """theta0 draws nominal * (1 + delta), delta ~ U(-fraction, fraction)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    nominal = np.asarray(nominal, dtype=float)
    delta = rng.uniform(-fraction, fraction, size=(count, nominal.size))
    return [nominal * (1.0 + d) for d in delta]


def cluster_estimates(thetas, rel_tol=1e-3):
    """Indices of the largest group of estimates within ``rel_tol`` (relative,
    per parameter) of that group's median."""
    T = np.asarray(thetas, dtype=float)
    best = np.zeros(0, dtype=int)
    for c in T:
        members = np.flatnonzero(np.all(np.abs(T - c) <= rel_tol * np.abs(c), axis=1))
        if members.size > best.size:
            best = members
    if best.size == 0:
        return best
    med = np.median(T[best], axis=0)
    return np.flatnonzero(np.all(np.abs(T - med) <= rel_tol * np.abs(med), axis=1))


def write_frm_csv(frm, path):
    """One row per excited line; four columns per (output, input) entry."""
    ny, nu = frm.G.shape[1:]
    head = ["k", "f_k"]
    for i in range(ny):
        for j in range(nu):
            s = f"{i + 1}{j + 1}"
            head += [f"re_G{s}", f"im_G{s}", f"var_total{s}", f"var_noise{s}"]
    nan = np.full(frm.G.shape, np.nan)
    vt = frm.var_total if frm.var_total is not None else nan
    vn = frm.var_noise if frm.var_noise is not None else nan
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(head)
        for l, (k, f) in enumerate(zip(frm.lines, frm.freqs)):
            row = [int(k), repr(float(f))]
            for i in range(ny):
                for j in range(nu):
                    g = frm.G[l, i, j]
                    row += [repr(float(g.real)), repr(float(g.imag)), repr(float(vt[l, i, j])),
                            repr(float(vn[l, i, j]))]
            wr.writerow(row)
