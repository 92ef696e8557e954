"""Step II-a: sliding-window inference of the restoring force.

Each window solves a regularised linear least-squares problem for the
feedback signal over H+1 samples. The problem is time invariant, so a single
gain matrix serves every window and every realization.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import IllPosedError, InstabilityError, NllfrError
from .excite import NoiseCovariances, nrmse, snr_lower_bound
from .model import periodic_linear_state

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class WindowOperator:
    H: int
    lam: float
    Ox: np.ndarray
    Su: np.ndarray
    Sw: np.ndarray
    Q: np.ndarray
    G: np.ndarray
    K: np.ndarray
    n_y: int
    n_u: int
    n_w: int

    @property
    def K1(self):
        """Rows of the gain producing the first window sample of w."""
        return self.K[: self.n_w]


def _toeplitz_blocks(dl, B, D, H):
    ny, m = D.shape
    blocks = [D]
    Ak = np.eye(dl.n_x)
    for _ in range(H):
        blocks.append(dl.Cy @ Ak @ B)
        Ak = Ak @ dl.A
    S = np.zeros((ny * (H + 1), m * (H + 1)))
    for i in range(H + 1):
        for j in range(i + 1):
            S[i * ny:(i + 1) * ny, j * m:(j + 1) * m] = blocks[i - j]
    return S


def observability_stack(dl, H):
    rows, Ak = [], np.eye(dl.n_x)
    for _ in range(H + 1):
        rows.append(dl.Cy @ Ak)
        Ak = Ak @ dl.A
    return np.vstack(rows)


def output_weight(Q_source, n_y):
    """Per-sample output weight: inverse noise covariance, or the inverse of
    given per-channel output variances."""
    if isinstance(Q_source, NoiseCovariances):
        if Q_source.available:
            try:
                cf = scipy.linalg.cho_factor(Q_source.time_cov)
                return scipy.linalg.cho_solve(cf, np.eye(n_y))
            except np.linalg.LinAlgError:
                log.warning("noise covariance is singular; using unit output weight")
        return np.eye(n_y)
    if Q_source is None:
        return np.eye(n_y)
    var = np.atleast_1d(np.asarray(Q_source, dtype=float))
    if var.ndim == 2:
        return np.linalg.inv(var)
    if var.shape != (n_y,) or np.any(var <= 0):
        raise ValueError(f"need {n_y} positive output variances, got {var}")
    return np.diag(1.0 / var)


def build_window_operator(dl, H, lam, Q_source=None):
    """Stacked window matrices and the gain K = (Sw' Q Sw + lam I)^-1 Sw' Q.

    ``Q_source`` is a :class:`NoiseCovariances`, an array of per-channel
    output variances (or a covariance matrix), or None for unit weight.
    """
    H = int(H)
    if H < 1:
        raise ValueError("horizon H must be >= 1")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    Ox = observability_stack(dl, H)
    Su = _toeplitz_blocks(dl, dl.Bu, dl.Dyu, H)
    Sw = _toeplitz_blocks(dl, dl.Bw, dl.Dyw, H)
    Qy = output_weight(Q_source, dl.n_y)
    Q = np.kron(np.eye(H + 1), Qy)
    StQ = Sw.T @ Q
    G = StQ @ Sw + lam * np.eye(Sw.shape[1])
    G = 0.5 * (G + G.T)
    try:
        cf = scipy.linalg.cho_factor(G)
        ok = np.all(np.diag(cf[0]) > 1e-12 * np.sqrt(np.max(np.abs(np.diag(G)))))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        if lam == 0:
            raise IllPosedError(
                f"Sw' Q Sw is singular for H={H} with n_w={dl.n_w}, n_y={dl.n_y}; "
                "the window problem is ill-posed without regularisation (use lambda > 0)"
            )
        raise IllPosedError(f"window normal matrix not positive definite at lambda={lam}")
    # QR of the stacked least-squares form avoids squaring the condition number
    Lq = np.linalg.cholesky(Q)
    m = Sw.shape[1]
    Qa, Ra = np.linalg.qr(np.vstack([Lq.T @ Sw, np.sqrt(lam) * np.eye(m)]))
    K = scipy.linalg.solve_triangular(Ra, Qa[: Sw.shape[0]].T @ Lq.T)
    return WindowOperator(H, float(lam), Ox, Su, Sw, Q, G, K, dl.n_y, dl.n_u, dl.n_w)


def solve_window(op, x_init, U_stack, Y_stack):
    """Minimiser of 0.5 |Y - Ox x - Su U - Sw W|_Q^2 + 0.5 lam |W|^2."""
    e = np.asarray(Y_stack, dtype=float) - op.Ox @ np.asarray(x_init, dtype=float) \
        - op.Su @ np.asarray(U_stack, dtype=float)
    return op.K @ e


def window_stack(sig, n, H):
    """Rows n..n+H of a periodic (N, ch) signal, flattened sample-major."""
    N = sig.shape[0]
    return sig[(n + np.arange(H + 1)) % N].ravel()


def bla_state_trajectory(dl, u):
    return periodic_linear_state(dl, u)


@dataclass(frozen=True, eq=False)
class WzDataset:
    """Inferred feedback pairs, shaped (R, N, n_z) and (R, N, n_w)."""

    z: np.ndarray
    w: np.ndarray
    provenance: dict = field(default_factory=dict)

    R = property(lambda self: self.z.shape[0])
    N = property(lambda self: self.z.shape[1])
    n_z = property(lambda self: self.z.shape[2])
    n_w = property(lambda self: self.w.shape[2])

    def flat(self):
        return self.z.reshape(-1, self.n_z), self.w.reshape(-1, self.n_w)


@dataclass
class RestoringForceResult:
    dwz: WzDataset
    x: np.ndarray
    y_sim: np.ndarray
    nrmse: np.ndarray

    @property
    def mean_nrmse(self):
        return float(np.mean(self.nrmse))


def theta_hash(theta):
    return hashlib.sha256(np.asarray(theta, dtype=np.float64).tobytes()).hexdigest()[:16]


def infer_restoring_force(ds, dl, H, lam, N0=100, Q_source=None, op=None, theta_phys=None):
    """Sliding-window restoring-force inference on a period-averaged dataset.

    The state starts at the linear periodic state at phase -N0 and evolves
    with the first feedback sample of each window for N0 + N steps; the
    first N0 are discarded. Window stacks wrap around the period.
    """
    if ds.P != 1:
        raise ValueError("average the periods first (excite.period_average)")
    op = op or build_window_operator(dl, H, lam, Q_source)
    R, N = ds.R, ds.N
    K1 = op.K1
    F = dl.A - dl.Bw @ K1 @ op.Ox
    Gin = np.hstack([dl.Bu, dl.Bw])
    idx = (np.arange(N)[:, None] + np.arange(op.H + 1)[None, :]) % N
    z_out = np.empty((R, N, dl.n_z))
    w_out = np.empty((R, N, dl.n_w))
    x_out = np.empty((R, N, dl.n_x))
    y_sim = np.empty((R, N, dl.n_y))
    err = np.empty(R)
    order = (np.arange(N0 + N) - N0) % N
    for r in range(R):
        u = ds.u[r, 0]
        y = ds.y[r, 0]
        Ys = y[idx].reshape(N, -1)
        Us = u[idx].reshape(N, -1)
        c = (Ys - Us @ op.Su.T) @ K1.T  # (N, n_w), periodic
        x0 = periodic_linear_state(dl, u)[(-N0) % N]
        v = np.ascontiguousarray(np.hstack([u, c])[order])
        bad, xs, _ = _kernels.linear_recursion(F, Gin, v, x0)
        if bad >= 0:
            raise InstabilityError(
                f"reconstructed trajectory diverged in realization {r} at step {bad - N0}",
                index=int(bad - N0), realization=r,
            )
        x = xs[N0:]
        w = c - x @ (K1 @ op.Ox).T
        x_out[r] = x
        w_out[r] = w
        z_out[r] = x @ dl.Cz.T
        y_sim[r] = x @ dl.Cy.T + u @ dl.Dyu.T + w @ dl.Dyw.T
        err[r] = nrmse(y, y_sim[r])
    prov = {"H": int(op.H), "lambda": float(op.lam), "N0": int(N0)}
    if theta_phys is not None:
        prov["theta_phys"] = [float(v) for v in theta_phys]
        prov["theta_hash"] = theta_hash(theta_phys)
    return RestoringForceResult(WzDataset(z_out, w_out, prov), x_out, y_sim, err)


def near_lower_bound(value, bound, rel_tol=0.05, abs_tol=0.02):
    """True when ``value`` (percent) is within max(rel_tol*bound, abs_tol) of
    ``bound``."""
    return bool(abs(value - bound) <= max(rel_tol * bound, abs_tol))


@dataclass
class GridResult:
    H_values: np.ndarray
    lambda_values: np.ndarray
    nonparam_nrmse: np.ndarray
    poly_nrmse: np.ndarray
    near_bound: np.ndarray
    failures: dict = field(default_factory=dict)

    def best(self):
        """(H, lambda, poly NRMSE) at the lowest finite polynomial-fit NRMSE."""
        i, j = np.unravel_index(np.nanargmin(self.poly_nrmse), self.poly_nrmse.shape)
        return int(self.H_values[i]), float(self.lambda_values[j]), float(self.poly_nrmse[i, j])

    def at(self, H, lam):
        i = int(np.flatnonzero(self.H_values == H)[0])
        j = int(np.argmin(np.abs(np.log(self.lambda_values) - np.log(lam))))
        return float(self.nonparam_nrmse[i, j]), float(self.poly_nrmse[i, j])


def grid_search(ds, dl, H_values, lambda_values, N0, poly_spec, Q_source=None, snr_db=None):
    """Restoring-force inference and polynomial fit on every (H, lambda).

    ``snr_db`` sets the lower bound used for the near-bound flags; points
    that fail are NaN and their reason is kept in ``failures``.
    """
    from .nlfit import fit_beta

    H_values = np.asarray(H_values, dtype=int)
    lambda_values = np.asarray(lambda_values, dtype=float)
    if H_values.size == 0 or lambda_values.size == 0:
        raise ValueError("grids must be non-empty")
    shape = (H_values.size, lambda_values.size)
    npr = np.full(shape, np.nan)
    pol = np.full(shape, np.nan)
    flag = np.zeros(shape, dtype=bool)
    fails = {}
    bound = snr_lower_bound(snr_db)
    for i, H in enumerate(H_values):
        for j, lam in enumerate(lambda_values):
            try:
                res = infer_restoring_force(ds, dl, H, lam, N0, Q_source)
                fit = fit_beta(res.dwz, poly_spec)
            except (NllfrError, np.linalg.LinAlgError) as exc:
                fails[(int(H), float(lam))] = f"{type(exc).__name__}: {exc}"
                continue
            npr[i, j] = res.mean_nrmse
            pol[i, j] = float(np.mean(fit.nrmse))
            flag[i, j] = near_lower_bound(npr[i, j], bound)
    return GridResult(H_values, lambda_values, npr, pol, flag, fails)


def write_grid_csv(grid, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["H", "lambda", "nonparam_nrmse", "poly_nrmse", "near_bound", "failure"])
        for i, H in enumerate(grid.H_values):
            for j, lam in enumerate(grid.lambda_values):
                wr.writerow([int(H), repr(float(lam)), repr(float(grid.nonparam_nrmse[i, j])),
                             repr(float(grid.poly_nrmse[i, j])), int(grid.near_bound[i, j]),
                             grid.failures.get((int(H), float(lam)), "")])


def write_wz_csv(dwz, path):
    """CSV with columns r, n, z_*, w_*, plus ``<path>.json`` provenance."""
    head = ["r", "n", *(f"z_{i + 1}" for i in range(dwz.n_z)), *(f"w_{i + 1}" for i in range(dwz.n_w))]
    r_idx, n_idx = np.meshgrid(np.arange(dwz.R), np.arange(dwz.N), indexing="ij")
    rows = np.column_stack([r_idx.ravel(), n_idx.ravel(),
                            dwz.z.reshape(-1, dwz.n_z), dwz.w.reshape(-1, dwz.n_w)])
    np.savetxt(path, rows, delimiter=",", header=",".join(head), comments="",
               fmt=["%d", "%d"] + ["%.17g"] * (dwz.n_z + dwz.n_w))
    with open(str(path) + ".json", "w") as fh:
        json.dump(dwz.provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")
