"""Step III: joint refinement of the physical parameters and the polynomial
coefficients by frequency-domain simulation error plus an l1 penalty on the
linear polynomial terms."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import DimensionError
from .excite import NoiseCovariances, nrmse
from .lmopt import LeastSquaresProblem, LmConfig, lm_minimize, smoothed_l1_residuals
from .model import steady_state_periodic


def auto_offset(model, N, tol=1e-9, minimum=100):
    """Offset samples for the linear part's slowest mode to decay to ``tol``,
    at least ``minimum`` and at most 2N."""
    rho = float(np.max(np.abs(np.linalg.eigvals(model.discrete.A))))
    if rho >= 1.0:
        return 2 * N
    n = math.ceil(math.log(tol) / math.log(rho)) if rho > 0 else minimum
    return int(min(max(n, minimum), 2 * N))


def extract_beta1(model_or_nl):
    """Degree-one polynomial coefficients, concatenated over locations."""
    nl = getattr(model_or_nl, "nonlinearity", model_or_nl)
    if nl.n_phi == 0:
        return np.zeros(0)
    return np.concatenate(nl.coefficients)[nl.degree_one_mask()]


def pack_theta(model):
    return np.concatenate([model.theta_phys, *model.nonlinearity.coefficients])


def unpack_theta(model, theta):
    n = model.spec.n_params
    sizes = [len(c) for c in model.nonlinearity.coefficients]
    if len(theta) != n + sum(sizes):
        raise DimensionError(f"expected {n + sum(sizes)} parameters, got {len(theta)}")
    cuts = np.cumsum([n, *sizes])[:-1]
    parts = np.split(np.asarray(theta, dtype=float), cuts)
    return model.replace(theta_phys=parts[0], nonlinearity=model.nonlinearity.with_coefficients(parts[1:]))


def param_names(model):
    names = list(model.spec.param_names)
    for i, ex in enumerate(model.nonlinearity.exponents):
        for e in ex:
            names.append(f"beta{i + 1}_" + "_".join(str(int(v)) for v in e))
    return names


def _sqrt_weight(W):
    """Principal Hermitian square roots of a stack of PSD matrices."""
    vals, vecs = np.linalg.eigh(W)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)[:, None, :]) @ np.conj(np.swapaxes(vecs, 1, 2))


def frequency_weighting(ds, noise=None):
    """Per-line weights W(k), k = 0..N/2, shaped (N/2+1, n_y, n_y).

    With sample noise covariances the weight is their inverse; otherwise a
    flat diagonal with each output's inverse mean power over excited lines.
    """
    K = ds.N // 2 + 1
    ny = ds.n_y
    if noise is not None and noise.available and noise.freq_cov is not None:
        S = noise.freq_cov
        tr = np.real(np.trace(S, axis1=1, axis2=2)) / ny
        ridge = 1e-12 * np.median(tr[tr > 0]) if np.any(tr > 0) else 1e-300
        return np.linalg.inv(S + ridge * np.eye(ny)[None])
    Y = numkit.dft(ds.y, axis=2)[:, :, ds.lines, :]
    power = np.mean(np.abs(Y) ** 2, axis=(0, 1, 2))
    return np.broadcast_to(np.diag(1.0 / power), (K, ny, ny)).astype(complex)


@dataclass(frozen=True, eq=False)
class FinalCostSpec:
    """Everything the Step III residual needs.

    ``u`` is (R, N, n_u) and ``Y`` the target spectrum (R, N/2+1, n_y) of
    the period-averaged outputs; ``L`` holds Hermitian square roots of W(k).
    """

    model: object
    u: np.ndarray
    y: np.ndarray
    Y: np.ndarray
    L: np.ndarray
    gamma: float
    N0: int
    epsilon: float

    R = property(lambda self: self.u.shape[0])
    N = property(lambda self: self.u.shape[1])


def build_cost_spec(ds, model, gamma=0.0, N0=None, noise=None, W=None, epsilon=None):
    """Assemble the Step III cost on a period-averaged copy of ``ds``.

    ``noise`` (sample covariances of the unaveraged data) selects the
    inverse-covariance weighting; ``W`` overrides the weighting altogether.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if ds.n_y != model.spec.n_y or ds.n_u != model.spec.n_u:
        raise DimensionError("dataset channels do not match the model structure")
    u = ds.u.mean(axis=1)
    y = ds.y.mean(axis=1)
    N = ds.N
    Y = numkit.dft(y, axis=1)[:, : N // 2 + 1]
    if W is None:
        W = frequency_weighting(ds, noise)
    W = np.asarray(W, dtype=complex)
    if W.shape != (N // 2 + 1, ds.n_y, ds.n_y):
        raise DimensionError(f"weighting must be ({N // 2 + 1}, {ds.n_y}, {ds.n_y}), got {W.shape}")
    L = _sqrt_weight(0.5 * (W + np.conj(np.swapaxes(W, 1, 2))))
    if N0 is None:
        N0 = auto_offset(model, N)
    if epsilon is None:
        b1 = extract_beta1(model)
        rms = float(np.sqrt(np.mean(b1 ** 2))) if b1.size else 0.0
        epsilon = 1e-8 * rms if rms > 0 else 1e-12
    return FinalCostSpec(model, u, y, Y, L, float(gamma), int(N0), float(epsilon))


def simulate_outputs(spec, model):
    """Steady-state outputs (R, N, n_y) of ``model`` on the cost inputs."""
    return np.stack([steady_state_periodic(model, spec.u[r], spec.N0).y for r in range(spec.R)])


def simulation_residuals(spec, theta):
    """Weighted spectral error, real and imaginary parts stacked; DC and
    Nyquist lines contribute their real part only."""
    model = unpack_theta(spec.model, theta)
    yhat = simulate_outputs(spec, model)
    Yhat = numkit.dft(yhat, axis=1)[:, : spec.N // 2 + 1]
    E = np.einsum("kij,rkj->rki", spec.L, spec.Y - Yhat) / np.sqrt(spec.R * spec.N)
    inner = E[:, 1:-1]
    edge = E[:, [0, -1]]
    return np.concatenate([inner.real.ravel(), inner.imag.ravel(), edge.real.ravel()])


def total_residuals(spec, theta):
    r = simulation_residuals(spec, theta)
    if spec.gamma == 0:
        return r
    b1 = extract_beta1(unpack_theta(spec.model, theta))
    return np.concatenate([r, smoothed_l1_residuals(b1, spec.gamma, spec.epsilon)])


def cost(spec, theta):
    r = total_residuals(spec, theta)
    return float(r @ r)


@dataclass
class FinalResult:
    model: object
    lm: object = field(repr=False)
    names: list = field(default_factory=list)
    nrmse_trace: list = field(default_factory=list)
    test_nrmse_trace: list = field(default_factory=list)

    @property
    def theta_trace(self):
        return self.lm.thetas

    def param_trace(self, name):
        return self.lm.thetas[:, self.names.index(name)]


def final_optimize(spec, theta0=None, config=None, test=None, progress=None):
    """LM on simulation residuals plus smoothed l1 pseudo-residuals.

    ``test`` is an optional (u, y) pair of single periods whose NRMSE is traced
    alongside the training NRMSE.
    """
    cfg = config or LmConfig()
    theta0 = pack_theta(spec.model) if theta0 is None else np.asarray(theta0, dtype=float)
    n_phys = spec.model.spec.n_params
    scale = np.where(theta0 != 0, np.abs(theta0), 1.0)

    def in_domain(th):
        return spec.model.spec.in_domain(th[:n_phys])

    problem = LeastSquaresProblem(lambda th: total_residuals(spec, th), len(theta0),
                                  in_domain=in_domain, scale=scale)
    train_tr, test_tr = [], []

    def record(theta):
        m = unpack_theta(spec.model, theta)
        train_tr.append(float(np.mean([nrmse(spec.y[r], yh) for r, yh in enumerate(simulate_outputs(spec, m))])))
        if test is not None:
            test_tr.append(validate_nrmse(m, test[0], test[1], spec.N0))

    record(theta0)
    last = [theta0]

    def cb(it, theta, c):
        if theta is not last[0]:
            record(theta)
            last[0] = theta
        else:
            train_tr.append(train_tr[-1])
            if test is not None:
                test_tr.append(test_tr[-1])
        if progress is not None:
            progress(it, theta, c)

    res = lm_minimize(problem, theta0, cfg, callback=cb)
    model = unpack_theta(spec.model, res.theta)
    model = model.replace(provenance={**spec.model.provenance, "step3": {
        "gamma": spec.gamma, "N0": spec.N0, "epsilon": spec.epsilon,
        "iterations": res.n_iter, "status": res.status, "cost": res.cost}})
    return FinalResult(model, res, param_names(spec.model), train_tr, test_tr)


def validate_nrmse(model, u, y, N0=None):
    """Steady-state simulation NRMSE on one period (or a stack of periods)."""
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if y.ndim == 1:
        y = y[:, None]
    N0 = auto_offset(model, len(u)) if N0 is None else N0
    return nrmse(y, steady_state_periodic(model, u, N0).y)


def write_report(path, report):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
