"""Step II-b: static polynomial regression of the inferred restoring force and
assembly of the initial NL-LFR model."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import numkit
from .errors import DimensionError, IdentifiabilityError, InsufficientDataError, RankError
from .excite import nrmse
from .model import NllfrModel, PolyNonlinearity, monomials


@dataclass(frozen=True)
class PolyLocation:
    """Monomials of one feedback channel over a subset of z."""

    z_indices: tuple[int, ...]
    exponents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "z_indices", tuple(int(j) for j in self.z_indices))
        object.__setattr__(self, "exponents", tuple(tuple(int(e) for e in ex) for ex in self.exponents))
        for ex in self.exponents:
            if len(ex) != len(self.z_indices) or min(ex, default=0) < 0:
                raise DimensionError(f"exponent tuple {ex} does not fit z indices {self.z_indices}")

    @property
    def has_degree_one(self):
        return any(sum(ex) == 1 for ex in self.exponents)


@dataclass(frozen=True)
class PolySpec:
    n_z: int
    locations: tuple[PolyLocation, ...]
    name: str = "custom"

    @property
    def n_w(self):
        return len(self.locations)

    def validate(self):
        for i, loc in enumerate(self.locations):
            if any(not 0 <= j < self.n_z for j in loc.z_indices):
                raise DimensionError(f"location {i}: z indices {loc.z_indices} out of range")
            seen = set()
            for ex in loc.exponents:
                if ex in seen:
                    raise IdentifiabilityError(f"location {i}: monomial {ex} appears twice",
                                               monomial=ex)
                seen.add(ex)

    def to_nonlinearity(self):
        return PolyNonlinearity.zeros(
            self.n_z, [loc.z_indices for loc in self.locations],
            [np.array(loc.exponents, dtype=np.int64).reshape(len(loc.exponents), len(loc.z_indices))
             for loc in self.locations],
        )

    def to_dict(self):
        return {"name": self.name, "n_z": self.n_z,
                "locations": [{"z_indices": list(l.z_indices), "exponents": [list(e) for e in l.exponents]}
                              for l in self.locations]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["n_z"]), tuple(PolyLocation(tuple(l["z_indices"]), tuple(map(tuple, l["exponents"])))
                                       for l in d["locations"]), d.get("name", "custom"))


def odd_monomials(n_vars, degree, cross_terms=False):
    """Exponent tuples of total odd degree <= ``degree``.

    Without cross terms each monomial involves a single variable.
    """
    out = []
    if cross_terms:
        for d in range(1, degree + 1, 2):
            for ex in itertools.product(range(d + 1), repeat=n_vars):
                if sum(ex) == d:
                    out.append(ex)
    else:
        for v in range(n_vars):
            for d in range(1, degree + 1, 2):
                ex = [0] * n_vars
                ex[v] = d
                out.append(tuple(ex))
    return tuple(out)


def odd_polynomial(n_z, z_indices, degree, cross_terms=False, n_w=1, name="custom"):
    loc = PolyLocation(tuple(z_indices), odd_monomials(len(z_indices), degree, cross_terms))
    return PolySpec(n_z, (loc,) * n_w, name)


def odd3():
    """phi(z) = [z, z^3] on a scalar z."""
    return odd_polynomial(1, (0,), 3, name="odd3")


def odd7_nocross():
    """Odd powers 1..7 of z1 and of z2, no products between them."""
    return odd_polynomial(2, (0, 1), 7, name="odd7_nocross")


BUILTIN_POLY_SPECS = {"odd3": odd3, "odd7_nocross": odd7_nocross}


def get_poly_spec(name_or_dict):
    if isinstance(name_or_dict, PolySpec):
        return name_or_dict
    if isinstance(name_or_dict, dict):
        return PolySpec.from_dict(name_or_dict)
    try:
        return BUILTIN_POLY_SPECS[name_or_dict]()
    except KeyError:
        raise KeyError(f"unknown polynomial spec {name_or_dict!r}; built-in: {sorted(BUILTIN_POLY_SPECS)}")


def regressors(z_sel, exponents):
    """(T, n_phi) monomial matrix for selected z of shape (T, n_sel)."""
    return monomials(z_sel, np.asarray(exponents, dtype=np.int64).reshape(len(exponents), z_sel.shape[1]))


@dataclass
class BetaFit:
    nonlinearity: PolyNonlinearity
    nrmse: np.ndarray
    residuals: list = field(default_factory=list, repr=False)


def fit_beta(dwz, spec):
    """Per-location ordinary least squares on standardised monomials.

    All realizations are pooled. Returns the fitted nonlinearity and the
    NRMSE of each location's fit against the inferred force.
    """
    spec.validate()
    if spec.n_z != dwz.n_z or spec.n_w != dwz.n_w:
        raise DimensionError(f"polynomial spec is {spec.n_z}->{spec.n_w}, data are {dwz.n_z}->{dwz.n_w}")
    Z, Wf = dwz.flat()
    coefs, errs, resid = [], [], []
    for i, loc in enumerate(spec.locations):
        n_phi = len(loc.exponents)
        if Z.shape[0] < n_phi:
            raise InsufficientDataError(f"location {i}: {Z.shape[0]} samples for {n_phi} monomials")
        Phi = regressors(Z[:, list(loc.z_indices)], loc.exponents)
        scale = np.sqrt(np.mean(Phi ** 2, axis=0))
        if np.any(scale == 0):
            col = int(np.flatnonzero(scale == 0)[0])
            raise IdentifiabilityError(f"location {i}: monomial {loc.exponents[col]} is identically zero",
                                       monomial=loc.exponents[col])
        try:
            b = numkit.lstsq(Phi / scale, Wf[:, i]) / scale
        except RankError as exc:
            col = exc.column if exc.column is not None else 0
            raise IdentifiabilityError(
                f"location {i}: monomial {loc.exponents[col]} is not identifiable from the data",
                monomial=loc.exponents[col]) from exc
        fit = Phi @ b
        coefs.append(b)
        resid.append(Wf[:, i] - fit)
        # an identically zero force is fitted exactly by zero coefficients
        errs.append(nrmse(Wf[:, i], fit) if np.any(Wf[:, i]) else 0.0)
    nl = spec.to_nonlinearity().with_coefficients(coefs)
    return BetaFit(nl, np.array(errs), resid)


def assemble_initial_model(spec, theta_phys, nl, Ts, provenance=None):
    if nl.n_z != spec.n_z or nl.n_w != spec.n_w:
        raise DimensionError(
            f"nonlinearity is {nl.n_z}->{nl.n_w}, structure {spec.name} expects {spec.n_z}->{spec.n_w}")
    return NllfrModel(spec, np.asarray(theta_phys, dtype=float), nl, Ts,
                      provenance=dict(provenance or {}))


def write_scatter_csv(dwz, nl, path):
    """z columns, inferred w and fitted w per location (surface-plot data)."""
    Z, Wf = dwz.flat()
    fitted = nl.features(Z) @ nl.beta()
    head = [f"z_{j + 1}" for j in range(dwz.n_z)]
    head += [f"w_{i + 1}" for i in range(dwz.n_w)] + [f"w_fit_{i + 1}" for i in range(dwz.n_w)]
    np.savetxt(path, np.column_stack([Z, Wf, fitted]), delimiter=",", header=",".join(head),
               comments="", fmt="%.17g")
