"""Random-phase multisine excitation and periodic input/output datasets."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import numkit
from .errors import DegenerateSignalError, DesignError, DimensionError


@dataclass(frozen=True, eq=False)
class MultisineDesign:
    """One period of ``N`` samples at ``fs``, exciting DFT ``lines``.

    ``amplitudes`` fix the spectral shape only; they are rescaled so the
    signal RMS equals ``target_rms``.
    """

    N: int
    fs: float
    lines: np.ndarray
    amplitudes: np.ndarray
    target_rms: float

    def __post_init__(self):
        object.__setattr__(self, "lines", np.asarray(self.lines, dtype=np.int64))
        object.__setattr__(self, "amplitudes", np.asarray(self.amplitudes, dtype=float))
        self.validate()

    @classmethod
    def band(cls, N, fs, f_max, rms, f_min=0.0):
        """Flat amplitude spectrum on every line with f_min < f_k <= f_max."""
        f0 = fs / N
        k = np.arange(1, N // 2)
        lines = k[(k * f0 > f_min) & (k * f0 <= f_max * (1 + 1e-12))]
        return cls(N=N, fs=fs, lines=lines, amplitudes=np.ones(len(lines)), target_rms=rms)

    def validate(self):
        if self.N < 2 or self.N % 2:
            raise DesignError(f"samples per period must be even, got N={self.N}")
        if self.lines.size == 0:
            raise DesignError("no excited lines")
        if self.lines.min() < 1 or self.lines.max() > self.N // 2 - 1:
            raise DesignError("excited lines must lie in 1..N/2-1")
        if len(np.unique(self.lines)) != len(self.lines):
            raise DesignError("excited lines repeat")
        if self.amplitudes.shape != self.lines.shape:
            raise DesignError("one amplitude per excited line required")
        if np.any(self.amplitudes < 0) or not np.any(self.amplitudes > 0):
            raise DesignError("amplitudes must be non-negative and not all zero")
        if not self.target_rms > 0 or not self.fs > 0:
            raise DesignError("target RMS and sampling frequency must be positive")

    @property
    def f0(self):
        return self.fs / self.N

    @property
    def Ts(self):
        return 1.0 / self.fs

    def scaled_amplitudes(self):
        # each line contributes 2 U_k^2 / N to the mean square
        ms = 2.0 * np.sum(self.amplitudes ** 2) / self.N
        return self.amplitudes * (self.target_rms / np.sqrt(ms))


def draw_phases(design, rng):
    return rng.uniform(0.0, 2.0 * np.pi, size=len(design.lines))


def multisine(design, phases, oversample=1):
    """Evaluate one period of the multisine on an ``oversample``-times finer grid.

    Sample ``m`` of the result sits at ``t = m / (oversample * fs)``; with
    ``oversample=1`` these are the ordinary samples.
    """
    M = design.N * int(oversample)
    X = np.zeros(M, dtype=complex)
    X[design.lines] = design.scaled_amplitudes() * np.exp(1j * np.asarray(phases))
    return (2.0 / np.sqrt(design.N)) * np.real(M * numkit.idft(X))


def generate_multisine(design, rng, oversample=1):
    """One period of a random-phase multisine, phases i.i.d. U[0, 2 pi)."""
    return multisine(design, draw_phases(design, rng), oversample)


def add_noise_snr(y0, snr_db, rng):
    """Add white Gaussian noise at ``snr_db`` relative to each channel's power.

    The last axis indexes channels; power is averaged over every other axis.
    ``snr_db`` of None or inf returns an unchanged copy.
    """
    y0 = np.asarray(y0, dtype=float)
    if snr_db is None or np.isinf(snr_db):
        return y0.copy()
    flat = y0.reshape(-1, y0.shape[-1]) if y0.ndim > 1 else y0[:, None]
    ps = np.mean(flat ** 2, axis=0)
    if np.any(ps <= 0):
        raise DegenerateSignalError("cannot set an SNR on a zero-power channel")
    sigma = np.sqrt(ps * 10.0 ** (-snr_db / 10.0))
    noise = rng.standard_normal(y0.shape) * (sigma if y0.ndim > 1 else sigma[0])
    return y0 + noise


def snr_lower_bound(snr_db):
    """Noise-to-signal amplitude ratio in percent; 0 for noise-free data."""
    if snr_db is None or np.isinf(snr_db):
        return 0.0
    return 100.0 * 10.0 ** (-snr_db / 20.0)


@dataclass(frozen=True, eq=False)
class MultisineDataset:
    """Periodic records shaped (R, P, N, channels)."""

    u: np.ndarray
    y: np.ndarray
    fs: float
    lines: np.ndarray
    input_names: tuple[str, ...] = ("u1",)
    output_names: tuple[str, ...] = ("y1",)
    input_units: tuple[str, ...] = ("",)
    output_units: tuple[str, ...] = ("",)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if u.ndim == 3:
            u = u[..., None]
        if y.ndim == 3:
            y = y[..., None]
        if u.ndim != 4 or y.ndim != 4 or u.shape[:3] != y.shape[:3]:
            raise DimensionError(f"u {u.shape} and y {y.shape} must be (R, P, N, ch)")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "lines", np.asarray(self.lines, dtype=np.int64))
        for attr, n in (("input_names", u.shape[3]), ("output_names", y.shape[3]),
                        ("input_units", u.shape[3]), ("output_units", y.shape[3])):
            val = tuple(getattr(self, attr))
            if len(val) != n:
                val = tuple(f"{attr[0]}{i + 1}" if "names" in attr else "" for i in range(n))
            object.__setattr__(self, attr, val)

    R = property(lambda self: self.u.shape[0])
    P = property(lambda self: self.u.shape[1])
    N = property(lambda self: self.u.shape[2])
    n_u = property(lambda self: self.u.shape[3])
    n_y = property(lambda self: self.y.shape[3])
    Ts = property(lambda self: 1.0 / self.fs)

    def with_(self, **changes):
        return replace(self, **changes)


def period_average(ds):
    """Collapse the period axis to its sample mean (P becomes 1)."""
    if ds.P == 1:
        return ds
    return ds.with_(u=ds.u.mean(axis=1, keepdims=True), y=ds.y.mean(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class NoiseCovariances:
    """Sample noise covariances from inter-period scatter.

    ``freq_cov`` covers lines 0..N/2 of the unnormalised DFT.
    """

    available: bool
    time_cov: np.ndarray | None = None
    freq_cov: np.ndarray | None = None


def sample_noise_cov(ds):
    if ds.P < 2:
        return NoiseCovariances(available=False)
    R, P, N = ds.R, ds.P, ds.N
    d = ds.y - ds.y.mean(axis=1, keepdims=True)
    time_cov = np.einsum("rpni,rpnj->ij", d, d) / (N * R * (P - 1))
    Y = numkit.dft(ds.y, axis=2)[:, :, : N // 2 + 1, :]
    D = Y - Y.mean(axis=1, keepdims=True)
    freq_cov = np.einsum("rpki,rpkj->kij", D, D.conj()) / (R * (P - 1))
    return NoiseCovariances(True, 0.5 * (time_cov + time_cov.T),
                            0.5 * (freq_cov + np.conj(np.swapaxes(freq_cov, 1, 2))))


def nrmse(ref, est):
    """100 * RMS(ref - est) / RMS(ref)."""
    ref = np.asarray(ref, dtype=float)
    est = np.asarray(est, dtype=float)
    if not np.any(ref):
        raise DegenerateSignalError("reference signal has zero RMS")
    # scaling by the peak keeps the squares clear of under- and overflow
    s = np.max(np.abs(ref))
    return 100.0 * float(np.linalg.norm(((ref - est) / s).ravel()) / np.linalg.norm((ref / s).ravel()))


MANIFEST = "manifest.json"


def _csv_name(r):
    return f"realization_{r:03d}.csv"


def save_dataset(ds, directory):
    """Write a manifest plus one CSV per realization."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "N": ds.N, "R": ds.R, "P": ds.P, "f_s": float(ds.fs),
        "excited_lines": [int(k) for k in ds.lines],
        "channels": {
            "inputs": [{"name": n, "unit": u} for n, u in zip(ds.input_names, ds.input_units)],
            "outputs": [{"name": n, "unit": u} for n, u in zip(ds.output_names, ds.output_units)],
        },
        "files": [_csv_name(r) for r in range(ds.R)],
        "meta": ds.meta,
    }
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_scalar)
        fh.write("\n")
    header = ",".join(["n", "p", *ds.input_names, *ds.output_names])
    fmt = ["%d", "%d"] + ["%.17g"] * (ds.n_u + ds.n_y)
    n_idx, p_idx = np.meshgrid(np.arange(ds.N), np.arange(ds.P))
    for r in range(ds.R):
        rows = np.column_stack([
            n_idx.ravel(), p_idx.ravel(),
            ds.u[r].reshape(-1, ds.n_u), ds.y[r].reshape(-1, ds.n_y),
        ])
        np.savetxt(os.path.join(directory, _csv_name(r)), rows, fmt=fmt,
                   delimiter=",", header=header, comments="")


def load_dataset(directory, demean=None):
    """Read a dataset written by :func:`save_dataset`.

    Measured data (``meta.source`` other than ``"synthetic"``) have the
    per-channel sample mean removed unless ``demean`` says otherwise.
    """
    with open(os.path.join(directory, MANIFEST)) as fh:
        man = json.load(fh)
    N, R, P = man["N"], man["R"], man["P"]
    ins = man["channels"]["inputs"]
    outs = man["channels"]["outputs"]
    n_u, n_y = len(ins), len(outs)
    u = np.empty((R, P, N, n_u))
    y = np.empty((R, P, N, n_y))
    files = man.get("files") or [_csv_name(r) for r in range(R)]
    for r, name in enumerate(files):
        data = np.loadtxt(os.path.join(directory, name), delimiter=",", skiprows=1, ndmin=2)
        if data.shape != (N * P, 2 + n_u + n_y):
            raise DimensionError(f"{name}: expected {(N * P, 2 + n_u + n_y)}, got {data.shape}")
        n = data[:, 0].astype(int)
        p = data[:, 1].astype(int)
        u[r, p, n] = data[:, 2:2 + n_u]
        y[r, p, n] = data[:, 2 + n_u:]
    meta = man.get("meta", {})
    if demean is None:
        demean = meta.get("source", "measured") != "synthetic"
    if demean:
        u = u - u.mean(axis=(0, 1, 2), keepdims=True)
        y = y - y.mean(axis=(0, 1, 2), keepdims=True)
    return MultisineDataset(
        u=u, y=y, fs=float(man["f_s"]), lines=np.asarray(man["excited_lines"], dtype=np.int64),
        input_names=tuple(c["name"] for c in ins), output_names=tuple(c["name"] for c in outs),
        input_units=tuple(c.get("unit", "") for c in ins),
        output_units=tuple(c.get("unit", "") for c in outs),
        meta=meta,
    )


def _json_scalar(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")
