"""Levenberg-Marquardt for real-valued residual maps with finite-difference
Jacobians.

Cost is the plain sum of squared residuals. Complex residuals are split into
real and imaginary parts by the caller; an l1 penalty enters as extra
pseudo-residuals from :func:`smoothed_l1_residuals`.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NllfrError, OptimizationError

log = logging.getLogger(__name__)


@dataclass
class LmConfig:
    max_iters: int = 100
    mu0: float = 1e-3
    mu_increase: float = 10.0
    mu_decrease: float = 0.1
    mu_min: float = 1e-15
    mu_max: float = 1e15
    gtol: float = 1e-10
    xtol: float = 1e-12
    fd_rel_step: float = 1e-6
    rho_accept: float = 0.1

    def __post_init__(self):
        if not (self.mu_increase > 1.0 > self.mu_decrease > 0.0):
            raise ValueError("need mu_increase > 1 > mu_decrease > 0")
        if min(self.max_iters, self.mu0, self.gtol, self.xtol, self.fd_rel_step) < 0:
            raise ValueError("LM settings must be non-negative")


@dataclass
class LeastSquaresProblem:
    """``residual(theta) -> r`` with optional domain predicate and analytic
    Jacobian. ``scale`` sets the finite-difference step floor per parameter
    (defaults to |theta0|, or 1 where that is zero)."""

    residual: Callable[[np.ndarray], np.ndarray]
    n_params: int
    in_domain: Callable[[np.ndarray], bool] | None = None
    scale: np.ndarray | None = None
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass
class LmIterate:
    iteration: int
    cost: float
    mu: float
    grad_norm: float
    accepted: bool
    theta: np.ndarray


@dataclass
class LmResult:
    theta: np.ndarray
    cost: float
    status: str
    n_iter: int
    grad_norm: float
    trace: list[LmIterate] = field(default_factory=list)

    @property
    def converged(self):
        return self.status in ("gtol", "xtol")

    @property
    def costs(self):
        return np.array([t.cost for t in self.trace])

    @property
    def thetas(self):
        return np.array([t.theta for t in self.trace])


def _safe_residual(fun, theta):
    try:
        r = np.asarray(fun(theta), dtype=float)
    except (NllfrError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.debug("residual failed at %s: %s", theta, exc)
        return None
    if not np.all(np.isfinite(r)):
        return None
    return r


def fd_jacobian(fun, theta, rel_step=1e-6, scale=None, max_shrink=3, in_domain=None):
    """Central-difference Jacobian, step ``rel_step * max(|theta_i|, scale_i)``.

    A non-finite evaluation shrinks that column's step tenfold, up to
    ``max_shrink`` times, before giving up. When one side of the stencil
    leaves ``in_domain`` a one-sided difference is used instead.
    """
    theta = np.asarray(theta, dtype=float)
    scale = np.ones_like(theta) if scale is None else np.asarray(scale, dtype=float)
    ok = in_domain or (lambda t: True)
    r0 = None
    cols = []
    for i in range(theta.size):
        h = rel_step * max(abs(theta[i]), scale[i])
        for _ in range(max_shrink + 1):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            rp = _safe_residual(fun, tp) if ok(tp) else None
            rm = _safe_residual(fun, tm) if ok(tm) else None
            if rp is not None and rm is not None:
                cols.append((rp - rm) / (tp[i] - tm[i]))
                break
            if rp is not None or rm is not None:
                if r0 is None:
                    r0 = _safe_residual(fun, theta)
                if r0 is not None:
                    cols.append((rp - r0) / (tp[i] - theta[i]) if rp is not None
                                else (r0 - rm) / (theta[i] - tm[i]))
                    break
            h *= 0.1
        else:
            raise OptimizationError(f"non-finite residuals around parameter {i} = {theta[i]!r}")
    return np.column_stack(cols)


def smoothed_l1_residuals(values, gamma, epsilon):
    """Pseudo-residuals whose squares sum to ``gamma * sum(sqrt(x^2 + eps^2))``."""
    values = np.asarray(values, dtype=float)
    if gamma == 0:
        return np.zeros(0)
    if gamma < 0 or not epsilon > 0:
        raise ValueError("need gamma >= 0 and epsilon > 0")
    return np.sqrt(gamma * np.sqrt(values ** 2 + epsilon ** 2))


def _grad_measure(J, r, g):
    # largest cosine between r and a Jacobian column; scale free
    rn = np.linalg.norm(r)
    cn = np.linalg.norm(J, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(cn > 0, np.abs(g) / (cn * rn), 0.0)
    return float(np.max(c)) if c.size and rn > 0 else 0.0


def lm_minimize(problem, theta0, config=None, callback=None):
    """Minimise ``sum(problem.residual(theta)**2)`` from ``theta0``.

    Each trial step counts as one iteration. A trial is accepted when the
    cost does not increase and the actual decrease is at least
    ``rho_accept`` times the decrease predicted by the linearisation; the
    ratio test stops sign-flipping steps on |x|-like residuals from being
    taken forever. Rejected trials (including non-finite residuals and steps
    outside ``problem.in_domain``) leave theta in place and raise the
    damping; accepted ones lower it. ``callback(it,
    theta, cost)`` runs after every iteration.
    """
    cfg = config or LmConfig()
    theta = np.asarray(theta0, dtype=float).copy()
    if problem.in_domain is not None and not problem.in_domain(theta):
        raise OptimizationError(f"initial parameters outside the domain: {theta}")
    r = _safe_residual(problem.residual, theta)
    if r is None:
        raise OptimizationError("residuals are not finite at the initial parameters")
    scale = problem.scale
    if scale is None:
        scale = np.where(theta != 0, np.abs(theta), 1.0)
    cost = float(r @ r)
    mu = cfg.mu0
    trace = [LmIterate(0, cost, mu, np.nan, True, theta.copy())]
    status = "max_iters"
    need_jac = True
    gnorm = np.nan
    it = 0
    while it < cfg.max_iters:
        if need_jac:
            try:
                J = (problem.jacobian(theta) if problem.jacobian is not None
                     else fd_jacobian(problem.residual, theta, cfg.fd_rel_step, scale,
                                      in_domain=problem.in_domain))
            except OptimizationError:
                if it == 0:
                    raise
                status = "jacobian_failed"
                break
            g = J.T @ r
            JtJ = J.T @ J
            d = np.diag(JtJ).copy()
            d = np.maximum(d, 1e-12 * max(d.max(initial=0.0), 1e-300))
            gnorm = _grad_measure(J, r, g)
            trace[-1].grad_norm = gnorm
            need_jac = False
            if cost == 0.0 or gnorm <= cfg.gtol:
                status = "gtol"
                break
        it += 1
        try:
            step = np.linalg.solve(JtJ + mu * np.diag(d), -g)
        except np.linalg.LinAlgError:
            step = np.full_like(theta, np.nan)
        trial = theta + step
        accepted = False
        if np.all(np.isfinite(trial)) and (problem.in_domain is None or problem.in_domain(trial)):
            r_new = _safe_residual(problem.residual, trial)
            if r_new is not None:
                c_new = float(r_new @ r_new)
                lin = r + J @ step
                predicted = cost - float(lin @ lin)
                if c_new <= cost and (predicted <= 0 or cost - c_new >= cfg.rho_accept * predicted):
                    accepted = True
        if accepted:
            small = np.all(np.abs(step) <= cfg.xtol * (np.abs(theta) + scale))
            theta, r, cost = trial, r_new, c_new
            mu = max(mu * cfg.mu_decrease, cfg.mu_min)
            need_jac = True
        else:
            mu = mu * cfg.mu_increase
        trace.append(LmIterate(it, cost, mu, gnorm, accepted, theta.copy()))
        if callback is not None:
            callback(it, theta, cost)
        if accepted and small:
            status = "xtol"
            break
        if mu > cfg.mu_max:
            status = "stalled"
            break
    if status in ("max_iters", "stalled", "jacobian_failed"):
        log.info("LM stopped (%s) after %d iterations, gradient measure %.3g", status, it, gnorm)
    return LmResult(theta, cost, status, it, gnorm, trace)


def write_trace_csv(result, path, param_names=None, extra=None):
    """One row per iteration: cost, damping, gradient measure, parameters.

    ``extra`` maps column name -> per-iteration sequence (e.g. NRMSE).
    """
    n = len(result.trace[0].theta)
    names = list(param_names) if param_names is not None else [f"theta_{i}" for i in range(n)]
    extra = extra or {}
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "cost", "mu", "grad_norm", "accepted", *extra, *names])
        for i, t in enumerate(result.trace):
            wr.writerow([t.iteration, repr(t.cost), repr(t.mu), repr(t.grad_norm), int(t.accepted),
                         *(repr(float(v[i])) for v in extra.values()),
                         *(repr(float(v)) for v in t.theta)])
