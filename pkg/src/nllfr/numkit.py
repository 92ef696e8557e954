"""Numerical kernels: matrix exponential, guarded dense solves, DFT, spline
resampling and seeded random streams.

Everything here is a pure function of its inputs.
"""

import warnings

import numpy as np
import scipy.linalg
from scipy.interpolate import CubicSpline

from .errors import DimensionError, InsufficientDataError, RankError

RANK_RTOL = 1e-12
RNG_ALGORITHM = "PCG64"


def make_rng(seed):
    """Return a numpy Generator backed by PCG64 for ``seed``.

    PCG64 streams are stable across platforms and numpy releases, which is
    what makes phase and noise draws reproducible from a recorded seed.
    """
    return np.random.Generator(np.random.PCG64(int(seed)))


def _as_square(M, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    return M


def matexp(M):
    """Matrix exponential by scaling and squaring with a degree-13 Padé
    approximant."""
    M = _as_square(M)
    if not np.all(np.isfinite(M)):
        raise ValueError("matexp input contains non-finite entries")
    return scipy.linalg.expm(M)


def solve(A, B):
    """Solve ``A X = B`` by LU with partial pivoting.

    Raises RankError when the smallest pivot falls below
    ``1e-12 * max pivot``.
    """
    A = _as_square(A, "A")
    B = np.asarray(B, dtype=float)
    if B.shape[0] != A.shape[0]:
        raise DimensionError(f"A is {A.shape}, B has {B.shape[0]} rows")
    with warnings.catch_warnings():
        # singularity is reported below through RankError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    pmax = pivots.max() if pivots.size else 0.0
    k = int(np.argmin(pivots))
    if pmax == 0.0 or pivots[k] <= RANK_RTOL * pmax:
        raise RankError(
            f"matrix is singular to tolerance: pivot {k} has magnitude "
            f"{pivots[k]:.3e} (max pivot {pmax:.3e})",
            pivot=float(pivots[k]),
            column=k,
        )
    return scipy.linalg.lu_solve((lu, piv), B)


def lstsq(A, b):
    """Least-squares solution of ``A x ≈ b`` via pivoted QR.

    Column rank is judged on the diagonal of R with the same relative
    threshold as :func:`solve`; on failure ``RankError.column`` names the
    first column of ``A`` found dependent.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2:
        raise DimensionError("A must be two-dimensional")
    m, n = A.shape
    if m < n:
        raise RankError(f"underdetermined system: {m} rows < {n} columns")
    if b.shape[0] != m:
        raise DimensionError(f"A has {m} rows, b has {b.shape[0]}")
    Q, R, perm = scipy.linalg.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if n and (d[0] == 0.0 or d[-1] <= RANK_RTOL * d[0]):
        bad = int(np.argmax(d <= RANK_RTOL * max(d[0], np.finfo(float).tiny)))
        raise RankError(
            f"rank-deficient design: column {perm[bad]} is dependent "
            f"(|R_ii| = {d[bad]:.3e})",
            pivot=float(d[bad]),
            column=int(perm[bad]),
        )
    z = scipy.linalg.solve_triangular(R, Q.T @ b)
    x = np.empty_like(z)
    x[perm] = z
    return x


def dft(x, axis=0):
    """Unnormalised forward DFT, ``X(k) = sum_n x(n) exp(-j 2 pi k n / N)``."""
    return np.fft.fft(x, axis=axis)


def idft(X, axis=0):
    """Inverse of :func:`dft` (carries the 1/N factor)."""
    return np.fft.ifft(X, axis=axis)


def resample_spline(x, factor, periodic=False, axis=0):
    """Upsample ``x`` by an integer ``factor`` with a natural cubic spline.

    The output contains the original samples at every ``factor``-th
    position. Without ``periodic`` the grid stops at the last input sample,
    giving ``(n - 1) * factor + 1`` points. With ``periodic`` the record is
    treated as one period: it is wrapped by a few samples on either side
    before fitting, and ``n * factor`` points are returned, so the result is
    again one period (end effects of the natural boundary fall outside the
    kept range).
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be a positive integer")
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 4:
        raise InsufficientDataError(f"need at least 4 samples, got {n}")
    if factor == 1:
        return x.copy()
    x = np.moveaxis(x, axis, 0)
    if periodic:
        pad = min(n, 32)
        xp = np.concatenate([x[-pad:], x, x[:pad]], axis=0)
        t = np.arange(-pad, n + pad, dtype=float)
        t_new = np.arange(n * factor) / factor
    else:
        xp = x
        t = np.arange(n, dtype=float)
        t_new = np.arange((n - 1) * factor + 1) / factor
    out = CubicSpline(t, xp, axis=0, bc_type="natural")(t_new)
    # knots hit exactly, not to rounding
    out[::factor] = x if not periodic else x[: len(out[::factor])]
    return np.moveaxis(out, 0, axis)
