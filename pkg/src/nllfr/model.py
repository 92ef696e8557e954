"""NL-LFR model representation.

A model is a structured continuous-time linear block, parametrised by
physical parameters, in feedback with a static polynomial map::

    x(n+1) = A x(n) + B_u u(n) + B_w w(n)
    y(n)   = C_y x(n) + D_yu u(n) + D_yw w(n)
    z(n)   = C_z x(n)
    w(n)   = beta.T @ phi(z(n))

The discrete matrices come from a zero-order-hold discretisation of the
continuous ones, recomputed whenever the physical parameters change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels, numkit
from .errors import (
    DimensionError,
    InstabilityError,
    ParameterDomainError,
    ResonanceError,
)


class ContinuousLti(NamedTuple):
    A: np.ndarray
    Bu: np.ndarray
    Bw: np.ndarray
    Cy: np.ndarray
    Cz: np.ndarray
    Dyu: np.ndarray
    Dyw: np.ndarray


@dataclass(frozen=True)
class StructuredLtiSpec:
    """Known ODE structure: maps ``theta_phys`` to continuous matrices.

    ``positive`` flags parameters that must stay strictly positive; ``build``
    is only called on vectors inside that domain.
    """

    name: str
    n_x: int
    n_u: int
    n_w: int
    n_y: int
    n_z: int
    param_names: tuple[str, ...]
    param_units: tuple[str, ...]
    build_fn: Callable[[np.ndarray], ContinuousLti] = field(repr=False, compare=False)
    positive: tuple[bool, ...] | None = None

    @property
    def n_params(self):
        return len(self.param_names)

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,) or not np.all(np.isfinite(theta)):
            return False
        if self.positive is not None:
            return bool(np.all(theta[np.asarray(self.positive)] > 0))
        return True

    def build(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise DimensionError(
                f"{self.name} expects {self.n_params} parameters, got {theta.shape}"
            )
        if not self.in_domain(theta):
            bad = [
                n for n, v, pos in zip(self.param_names, theta, self.positive or ())
                if pos and not v > 0
            ]
            raise ParameterDomainError(
                f"{self.name}: parameters outside domain {bad or list(theta)}"
            )
        lti = ContinuousLti(*(np.atleast_2d(np.asarray(m, dtype=float))
                              for m in self.build_fn(theta)))
        shapes = {
            "A": (self.n_x, self.n_x), "Bu": (self.n_x, self.n_u),
            "Bw": (self.n_x, self.n_w), "Cy": (self.n_y, self.n_x),
            "Cz": (self.n_z, self.n_x), "Dyu": (self.n_y, self.n_u),
            "Dyw": (self.n_y, self.n_w),
        }
        for name, shape in shapes.items():
            if getattr(lti, name).shape != shape:
                raise DimensionError(
                    f"{self.name}: {name} has shape {getattr(lti, name).shape}, "
                    f"declared {shape}"
                )
        return lti


def _duffing_build(theta):
    m, c, k = theta
    return ContinuousLti(
        A=[[0.0, 1.0], [-k / m, -c / m]],
        Bu=[[0.0], [1.0 / m]],
        Bw=[[0.0], [-1.0 / m]],
        Cy=[[1.0, 0.0]],
        Cz=[[1.0, 0.0]],
        Dyu=[[0.0]],
        Dyw=[[0.0]],
    )


def _chain2dof_build(theta):
    # mass 1 tied to ground (k1, c1, nonlinearity), mass 2 tied to mass 1
    # (k2, c2); force applied and displacement measured at mass 2
    m1, m2, c1, c2, k1, k2 = theta
    Minv = np.diag([1.0 / m1, 1.0 / m2])
    K = np.array([[k1 + k2, -k2], [-k2, k2]])
    C = np.array([[c1 + c2, -c2], [-c2, c2]])
    A = np.block([[np.zeros((2, 2)), np.eye(2)], [-Minv @ K, -Minv @ C]])
    return ContinuousLti(
        A=A,
        Bu=[[0.0], [0.0], [0.0], [1.0 / m2]],
        Bw=[[0.0], [0.0], [-1.0 / m1], [0.0]],
        Cy=[[0.0, 1.0, 0.0, 0.0]],
        Cz=[[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        Dyu=[[0.0]],
        Dyw=[[0.0]],
    )


DUFFING = StructuredLtiSpec(
    name="duffing", n_x=2, n_u=1, n_w=1, n_y=1, n_z=1,
    param_names=("m", "c", "k"), param_units=("kg", "N s/m", "N/m"),
    build_fn=_duffing_build, positive=(True, True, True),
)

CHAIN2DOF = StructuredLtiSpec(
    name="chain2dof", n_x=4, n_u=1, n_w=1, n_y=1, n_z=2,
    param_names=("m1", "m2", "c1", "c2", "k1", "k2"),
    param_units=("kg", "kg", "N s/m", "N s/m", "N/m", "N/m"),
    build_fn=_chain2dof_build, positive=(True,) * 6,
)

_SPECS = {"duffing": DUFFING, "chain2dof": CHAIN2DOF}


def register_spec(spec):
    """Make a user-defined structure available by name (model JSON loading)."""
    _SPECS[spec.name] = spec
    return spec


def get_spec(name):
    try:
        return _SPECS[name]
    except KeyError:
        raise KeyError(f"unknown model structure {name!r}; known: {sorted(_SPECS)}")


@dataclass(frozen=True, eq=False)
class DiscreteLinear:
    A: np.ndarray
    Bu: np.ndarray
    Bw: np.ndarray
    Cy: np.ndarray
    Cz: np.ndarray
    Dyu: np.ndarray
    Dyw: np.ndarray
    Ts: float

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.Bu.shape[1]

    @property
    def n_w(self):
        return self.Bw.shape[1]

    @property
    def n_y(self):
        return self.Cy.shape[0]

    @property
    def n_z(self):
        return self.Cz.shape[0]


def discretize_lti(lti, Ts):
    """ZOH discretisation of both input channels with one matrix exponential."""
    if not Ts > 0:
        raise ValueError(f"sampling period must be positive, got {Ts}")
    A, Bu, Bw = lti.A, lti.Bu, lti.Bw
    nx, nu, nw = A.shape[0], Bu.shape[1], Bw.shape[1]
    M = np.zeros((nx + nu + nw, nx + nu + nw))
    M[:nx, :nx] = A
    M[:nx, nx:nx + nu] = Bu
    M[:nx, nx + nu:] = Bw
    E = numkit.matexp(M * Ts)
    return DiscreteLinear(
        A=E[:nx, :nx], Bu=E[:nx, nx:nx + nu], Bw=E[:nx, nx + nu:],
        Cy=lti.Cy.copy(), Cz=lti.Cz.copy(), Dyu=lti.Dyu.copy(), Dyw=lti.Dyw.copy(),
        Ts=float(Ts),
    )


def discretize(spec, theta_phys, Ts):
    return discretize_lti(spec.build(theta_phys), Ts)


def _resolvent_apply(A, B, zeta, lines=None):
    """Solve ``(zeta_k I - A) X_k = B_k`` for every k (batched).

    ``B`` is (n_x, m) shared or (K, n_x, m) per line.
    """
    nx = A.shape[0]
    eig = np.linalg.eigvals(A)
    dist = np.min(np.abs(zeta[:, None] - eig[None, :]), axis=1)
    scale = 1.0 + np.max(np.abs(eig), initial=0.0)
    bad = np.flatnonzero(dist <= 1e-12 * scale)
    if bad.size:
        k = bad[0] if lines is None else lines[bad[0]]
        raise ResonanceError(f"zeta_k I - A is singular at line {k}", line=int(k))
    M = zeta[:, None, None] * np.eye(nx)[None] - A[None].astype(complex)
    if B.ndim == 2:
        B = np.broadcast_to(B, (len(zeta),) + B.shape)
    return np.linalg.solve(M, B.astype(complex))


def parametric_frm(dl, lines, N):
    """``G(zeta_k) = C_y (zeta_k I - A)^-1 B_u + D_yu`` for the given DFT lines.

    Returns an array of shape (len(lines), n_y, n_u).
    """
    lines = np.atleast_1d(np.asarray(lines))
    zeta = np.exp(2j * np.pi * lines / N)
    X = _resolvent_apply(dl.A, dl.Bu, zeta, lines)
    return dl.Cy[None] @ X + dl.Dyu[None]


def periodic_linear_state(dl, u):
    """Steady-state periodic state of the linear block driven by one period ``u``.

    Computed line by line in the frequency domain; lines where the input
    spectrum vanishes carry no state. Returns (N, n_x) real samples.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    N = u.shape[0]
    U = numkit.dft(u, axis=0)
    mag = np.max(np.abs(U), axis=1)
    active = np.flatnonzero(mag > 1e-13 * max(mag.max(), 1e-300))
    X = np.zeros((N, dl.n_x), dtype=complex)
    if active.size:
        zeta = np.exp(2j * np.pi * active / N)
        rhs = dl.Bu[None].astype(complex) @ U[active][:, :, None]
        X[active] = _resolvent_apply(dl.A, rhs, zeta, active)[:, :, 0]
    return np.real(numkit.idft(X, axis=0))


def monomials(Z, E):
    """(T, n_phi) products of Z (T, n) raised to the rows of E (n_phi, n).

    Powers are taken of |Z| and the sign restored by exponent parity, so odd
    monomials are exactly odd in floating point (vectorised pow is not).
    """
    Z = np.asarray(Z, dtype=float)
    E = np.asarray(E, dtype=np.int64)
    P = np.abs(Z)[:, None, :] ** E[None]
    flip = (Z < 0)[:, None, :] & (E[None] % 2 == 1)
    return np.prod(np.where(flip, -P, P), axis=2)


@dataclass(frozen=True, eq=False)
class PolyNonlinearity:
    """Decoupled polynomial feedback: one location per entry of w.

    ``selections[i]`` lists the z indices seen by location i (rows of the
    binary selection matrix), ``exponents[i]`` is (n_phi_i, n_z_i) with one
    monomial per row, ``coefficients[i]`` is beta_i.
    """

    n_z: int
    selections: tuple[tuple[int, ...], ...]
    exponents: tuple[np.ndarray, ...]
    coefficients: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not (len(self.selections) == len(self.exponents) == len(self.coefficients)):
            raise DimensionError("selections, exponents and coefficients differ in length")
        for sel, ex, co in zip(self.selections, self.exponents, self.coefficients):
            if any(not 0 <= j < self.n_z for j in sel):
                raise DimensionError(f"selection {sel} out of range for n_z={self.n_z}")
            if ex.ndim != 2 or ex.shape[1] != len(sel):
                raise DimensionError(f"exponents {ex.shape} do not match selection {sel}")
            if co.shape != (ex.shape[0],):
                raise DimensionError(f"coefficients {co.shape} do not match {ex.shape[0]} monomials")

    @classmethod
    def zeros(cls, n_z, selections, exponents):
        exps = tuple(np.asarray(e, dtype=np.int64).reshape(len(e), -1) for e in exponents)
        return cls(
            n_z=n_z,
            selections=tuple(tuple(int(j) for j in s) for s in selections),
            exponents=exps,
            coefficients=tuple(np.zeros(len(e)) for e in exps),
        )

    @classmethod
    def none(cls, n_z, n_w):
        """No feedback at all (linear model); each location has zero monomials."""
        return cls(
            n_z=n_z,
            selections=tuple(() for _ in range(n_w)),
            exponents=tuple(np.zeros((0, 0), dtype=np.int64) for _ in range(n_w)),
            coefficients=tuple(np.zeros(0) for _ in range(n_w)),
        )

    def with_coefficients(self, coefficients):
        return PolyNonlinearity(
            self.n_z, self.selections, self.exponents,
            tuple(np.asarray(c, dtype=float).copy() for c in coefficients),
        )

    @property
    def n_w(self):
        return len(self.selections)

    @property
    def n_phi(self):
        return sum(e.shape[0] for e in self.exponents)

    def selection_matrix(self, i):
        sel = self.selections[i]
        P = np.zeros((len(sel), self.n_z))
        P[np.arange(len(sel)), sel] = 1.0
        return P

    def full_exponents(self):
        """(n_phi, n_z) exponents over the whole z vector, locations stacked."""
        rows = []
        for sel, ex in zip(self.selections, self.exponents):
            full = np.zeros((ex.shape[0], self.n_z), dtype=np.int64)
            full[:, list(sel)] = ex
            rows.append(full)
        if not rows:
            return np.zeros((0, self.n_z), dtype=np.int64)
        return np.vstack(rows)

    def beta(self):
        """Block-diagonal coefficient matrix of shape (n_phi, n_w)."""
        B = np.zeros((self.n_phi, self.n_w))
        r = 0
        for i, co in enumerate(self.coefficients):
            B[r:r + len(co), i] = co
            r += len(co)
        return B

    def features(self, z):
        """phi(z) for z of shape (n_z,) or (T, n_z)."""
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        phi = monomials(np.atleast_2d(z), self.full_exponents())
        return phi[0] if single else phi

    def degree_one_mask(self):
        """Boolean mask over stacked coefficients marking degree-one monomials."""
        if self.n_phi == 0:
            return np.zeros(0, dtype=bool)
        return np.concatenate([e.sum(axis=1) == 1 for e in self.exponents])


def eval_nonlinearity(nl, z):
    """w_i = beta_i . phi_i(P_i z); z may be (n_z,) or (T, n_z)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != nl.n_z:
        raise DimensionError(f"z has {z.shape[-1]} entries, nonlinearity expects {nl.n_z}")
    return nl.features(z) @ nl.beta()


@dataclass(frozen=True, eq=False)
class NllfrModel:
    spec: StructuredLtiSpec
    theta_phys: np.ndarray
    nonlinearity: PolyNonlinearity
    Ts: float
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "theta_phys", np.asarray(self.theta_phys, dtype=float).copy())
        if self.nonlinearity.n_w != self.spec.n_w or self.nonlinearity.n_z != self.spec.n_z:
            raise DimensionError(
                f"nonlinearity is {self.nonlinearity.n_z}->{self.nonlinearity.n_w}, "
                f"structure expects {self.spec.n_z}->{self.spec.n_w}"
            )

    @cached_property
    def discrete(self):
        return discretize(self.spec, self.theta_phys, self.Ts)

    def replace(self, theta_phys=None, nonlinearity=None, provenance=None):
        return NllfrModel(
            spec=self.spec,
            theta_phys=self.theta_phys if theta_phys is None else theta_phys,
            nonlinearity=self.nonlinearity if nonlinearity is None else nonlinearity,
            Ts=self.Ts,
            provenance=dict(self.provenance if provenance is None else provenance),
        )

    def linear_part(self):
        """Same physical parameters with the feedback removed."""
        return self.replace(nonlinearity=PolyNonlinearity.none(self.spec.n_z, self.spec.n_w))


class SimResult(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x_end: np.ndarray


def _as_input(u, n_u):
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[1] != n_u:
        raise DimensionError(f"input has {u.shape[1]} channels, model expects {n_u}")
    return u


def simulate_discrete(dl, nl, u, x0=None):
    """Run the closed-loop recursion for len(u) steps."""
    u = _as_input(u, dl.n_u)
    x0 = np.zeros(dl.n_x) if x0 is None else np.asarray(x0, dtype=float).reshape(dl.n_x)
    expo = nl.full_exponents()
    beta = nl.beta()
    bad, x, y, z, w, x_end = _kernels.nllfr_sim(
        dl.A, dl.Bu, dl.Bw, dl.Cy, dl.Cz, dl.Dyu, dl.Dyw,
        np.ascontiguousarray(expo), np.ascontiguousarray(beta),
        np.ascontiguousarray(u), x0,
    )
    if bad >= 0:
        raise InstabilityError(f"simulation diverged at sample {bad}", index=int(bad))
    return SimResult(x, y, z, w, x_end)


def simulate_nllfr(model, u, x0=None, n_steps=None):
    """Simulate ``model`` from ``x0``; ``u`` is extended periodically when
    ``n_steps`` exceeds its length."""
    dl = model.discrete
    u = _as_input(u, dl.n_u)
    if n_steps is not None and n_steps != len(u):
        u = u[np.arange(n_steps) % len(u)]
    return simulate_discrete(dl, model.nonlinearity, u, x0)


def steady_state_periodic(model, u, N0, x0=None):
    """Simulate N0 + N steps starting at phase -N0 and keep the last N.

    ``u`` is one period. Without ``x0`` the start state is the periodic
    linear-block state at phase -N0, which removes most of the transient
    before it starts.
    """
    dl = model.discrete
    u = _as_input(u, dl.n_u)
    N = len(u)
    N0 = int(N0)
    if N0 < 0:
        raise ValueError("N0 must be non-negative")
    if x0 is None:
        x0 = periodic_linear_state(dl, u)[(-N0) % N]
    idx = (np.arange(N0 + N) - N0) % N
    sim = simulate_discrete(dl, model.nonlinearity, u[idx], x0)
    return SimResult(sim.x[N0:], sim.y[N0:], sim.z[N0:], sim.w[N0:], sim.x_end)


def model_to_dict(model):
    nl = model.nonlinearity
    return {
        "spec": model.spec.name,
        "param_names": list(model.spec.param_names),
        "theta_phys": [float(v) for v in model.theta_phys],
        "Ts": float(model.Ts),
        "nonlinearity": {
            "n_z": nl.n_z,
            "locations": [
                {
                    "z_indices": list(sel),
                    "exponents": ex.tolist(),
                    "beta": [float(v) for v in co],
                }
                for sel, ex, co in zip(nl.selections, nl.exponents, nl.coefficients)
            ],
        },
        "provenance": model.provenance,
    }


def model_from_dict(d):
    spec = get_spec(d["spec"])
    nl_d = d["nonlinearity"]
    locs = nl_d["locations"]
    nl = PolyNonlinearity(
        n_z=int(nl_d["n_z"]),
        selections=tuple(tuple(int(j) for j in loc["z_indices"]) for loc in locs),
        exponents=tuple(
            np.asarray(loc["exponents"], dtype=np.int64).reshape(len(loc["beta"]), len(loc["z_indices"]))
            for loc in locs
        ),
        coefficients=tuple(np.asarray(loc["beta"], dtype=float) for loc in locs),
    )
    return NllfrModel(spec, np.asarray(d["theta_phys"], dtype=float), nl, float(d["Ts"]),
                      provenance=d.get("provenance", {}))


def save_model(model, path):
    # float repr is the shortest string that round-trips bit-exactly
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2, default=_json_default)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
