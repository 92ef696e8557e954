"""End-to-end identification: configuration, presets, synthetic data and the
three-stage run with its artifacts."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

from . import bla, excite, finalopt, nlfit, numkit, slidewin, truth
from .errors import ConfigError, NllfrError, StageError
from .lmopt import LmConfig, write_trace_csv
from .model import NllfrModel, PolyNonlinearity, get_spec, save_model, steady_state_periodic

log = logging.getLogger(__name__)

STAGES = ("bla", "restoring", "final")

PRESETS = {
    "duffing": {
        "structure": "duffing",
        "true_params": {"m": 1.0, "c": 2.0, "k": 100.0, "k3": 500.0},
        "synthetic": {
            "system": "duffing", "N": 8192, "fs": 128.0, "f_max": 10.0, "rms": 12.0,
            "R": 5, "P": 2, "snr_db": [60.0, 40.0, 20.0, None], "test_R": 1, "test_P": 1,
            "smooth_input": False, "settle_periods": 3, "substeps": 16, "upsample": 1,
        },
        "seeds": {"phases": 20240601, "noise": 20240602},
        "step1": {"nominal": [1.0, 2.0, 100.0], "restarts": 100, "fraction": 0.9, "max_iters": 100},
        "step2": {"H": 10, "lambda": 1e-4, "N0": 100, "poly": "odd3", "grid": None},
        "step3": {"gamma": 5e-3, "max_iters": 100, "N0": None},
        "stages": list(STAGES),
    },
    "chain2dof": {
        "structure": "chain2dof",
        "true_params": {"m1": 2.0, "m2": 1.0, "c1": 5.0, "c2": 2.0, "k1": 800.0, "k2": 600.0},
        "synthetic": {
            "system": "chain2dof", "N": 8192, "fs": 128.0, "f_max": 10.0, "rms": 10.0,
            "R": 6, "P": 1, "snr_db": [None], "test_R": 1, "test_P": 1,
            "smooth_input": False, "settle_periods": 3, "substeps": 16, "upsample": 1,
        },
        "seeds": {"phases": 20240611, "noise": 20240612},
        "step1": {"nominal": [2.0, 1.0, 5.0, 2.0, 800.0, 600.0], "restarts": 10, "fraction": 0.9,
                  "max_iters": 100},
        "step2": {"H": 15, "lambda": 1e-8, "N0": 100, "poly": "odd7_nocross", "grid": None},
        "step3": {"gamma": 1e-5, "max_iters": 100, "N0": None},
        "stages": list(STAGES),
    },
}


def load_schema():
    with resources.files("nllfr").joinpath("config_schema.json").open() as fh:
        return json.load(fh)


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(cfg):
    """Expand ``preset`` and validate against the schema; returns a new dict."""
    cfg = dict(cfg)
    preset = cfg.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}")
        cfg = _merge(PRESETS[preset], cfg)
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from exc
    if "step2" in cfg and cfg["step2"].get("H", 1) < 1:
        raise ConfigError("step2.H must be >= 1")
    return cfg


def load_config(path):
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return resolve_config(cfg)


# ---------------------------------------------------------------- synthetic data

def _streams(seeds):
    ph = np.random.SeedSequence(int(seeds["phases"])).spawn(3)
    no = np.random.SeedSequence(int(seeds["noise"])).spawn(2)
    gen = lambda s: np.random.Generator(np.random.PCG64(s))
    return {"train_phases": gen(ph[0]), "test_phases": gen(ph[1]), "restarts": gen(ph[2]),
            "train_noise": no[0], "test_noise": no[1]}


def restart_rng(seeds):
    return _streams(seeds)["restarts"]


def design_from(syn):
    return excite.MultisineDesign.band(int(syn["N"]), float(syn["fs"]), float(syn["f_max"]),
                                       float(syn["rms"]), float(syn.get("f_min", 0.0)))


def system_from(syn):
    name = syn["system"]
    params = syn.get("system_params", {})
    if name == "duffing":
        return truth.duffing_system(**params)
    if name == "chain2dof":
        return truth.chain2dof_system(**params)
    raise ConfigError(f"no built-in ground-truth system {name!r}")


def snr_label(snr):
    return "snr_inf" if snr is None else f"snr_{snr:g}"


def noisy_copy(ds, snr, seq, tag):
    # one noise stream per SNR level, independent of the order levels are listed in
    if snr is None:
        return ds.with_(meta={**ds.meta, "snr_db": None})
    sub = np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (int(round(snr * 1000)),))
    rng = np.random.Generator(np.random.PCG64(sub))
    return ds.with_(y=excite.add_noise_snr(ds.y, snr, rng),
                    meta={**ds.meta, "snr_db": float(snr), "noise_stream": tag})


def generate_datasets(cfg):
    """Noise-free training and test data plus noisy copies per SNR.

    Returns {label: (train, test)}. With ``upsample`` > 1 both sets are
    spline-upsampled after the noise is added.
    """
    syn = cfg["synthetic"]
    design = design_from(syn)
    system = system_from(syn)
    st = _streams(cfg["seeds"])
    kw = dict(settle_periods=int(syn.get("settle_periods", 3)), substeps=int(syn.get("substeps", 16)),
              smooth_input=bool(syn.get("smooth_input", False)))
    train0 = truth.steady_state_data(system, design, int(syn["R"]), int(syn["P"]), st["train_phases"], **kw)
    test0 = truth.steady_state_data(system, design, int(syn.get("test_R", 1)), int(syn.get("test_P", 1)),
                                    st["test_phases"], **kw)
    seeds = {"phases": int(cfg["seeds"]["phases"]), "noise": int(cfg["seeds"]["noise"])}
    out = {}
    for snr in syn.get("snr_db", [None]):
        tr = noisy_copy(train0, snr, st["train_noise"], "train")
        te = noisy_copy(test0, snr, st["test_noise"], "test")
        tr = tr.with_(meta={**tr.meta, "seeds": seeds, "role": "train"})
        te = te.with_(meta={**te.meta, "seeds": seeds, "role": "test"})
        factor = int(syn.get("upsample", 1))
        if factor > 1:
            tr, te = resample_dataset(tr, factor), resample_dataset(te, factor)
        out[snr_label(snr)] = (tr, te)
    return out


def resample_dataset(ds, factor):
    """Periodic cubic-spline upsampling of every record by an integer factor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("resampling factor must be >= 1")
    if factor == 1:
        return ds
    u = numkit.resample_spline(ds.u, factor, periodic=True, axis=2)
    y = numkit.resample_spline(ds.y, factor, periodic=True, axis=2)
    meta = {**ds.meta, "resampled": {"factor": factor, "fs_original": float(ds.fs),
                                     "N_original": int(ds.N)}}
    return ds.with_(u=u, y=y, fs=ds.fs * factor, meta=meta)


def downsample_output(y, factor):
    return np.asarray(y)[:: int(factor)]


# ---------------------------------------------------------------- identification

@dataclass
class IdentifyResult:
    stages_run: list
    frm: object = None
    step1_fits: list = field(default_factory=list)
    bla_model: NllfrModel | None = None
    restoring: object = None
    beta_fit: object = None
    initial_model: NllfrModel | None = None
    final: object = None
    grid: object = None
    report: dict = field(default_factory=dict)

    @property
    def model(self):
        if self.final is not None:
            return self.final.model
        return self.initial_model if self.initial_model is not None else self.bla_model


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except (NllfrError, np.linalg.LinAlgError, ValueError) as exc:
        raise StageError(name, exc) from exc


def run_step1(ds, spec, s1, rng):
    frm = bla.estimate_bla(ds)
    nominal = np.asarray(s1["nominal"], dtype=float)
    n = int(s1.get("restarts", 1))
    starts = [nominal] if n <= 1 else bla.random_restart_init(nominal, float(s1.get("fraction", 0.9)), n, rng)
    fits = []
    for th0 in starts:
        try:
            fits.append(bla.fit_parametric_bla(frm, spec, th0, ds.Ts, int(s1.get("max_iters", 100))))
        except NllfrError as exc:
            log.info("BLA restart from %s failed: %s", th0, exc)
    if not fits:
        raise NllfrError("every BLA restart failed")
    return frm, fits


def q_source(ds, noise):
    """Window weight: inverse noise covariance, else inverse output variances
    of the period-averaged record."""
    if noise.available:
        return noise
    return np.var(ds.y.mean(axis=1).reshape(-1, ds.n_y), axis=0)


def nrmse_on(model, ds, N0=None):
    """Mean steady-state simulation NRMSE over the realizations of ``ds``
    (period-averaged outputs as reference)."""
    u = ds.u.mean(axis=1)
    y = ds.y.mean(axis=1)
    return float(np.mean([finalopt.validate_nrmse(model, u[r], y[r], N0) for r in range(ds.R)]))


def identify(ds, cfg, out_dir=None, test=None):
    """Run the configured stages on ``ds``; artifacts go to ``out_dir``."""
    cfg = resolve_config(cfg) if "preset" in cfg else cfg
    spec = get_spec(cfg["structure"])
    stages = list(cfg.get("stages", STAGES))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    p = (lambda name: os.path.join(out_dir, name)) if out_dir else None
    res = IdentifyResult(stages_run=[])
    rep = {"structure": spec.name, "param_names": list(spec.param_names),
           "seeds": cfg.get("seeds"), "dataset": {"R": ds.R, "P": ds.P, "N": ds.N, "fs": ds.fs},
           "nrmse_train": {}, "nrmse_test": {}, "stages": []}
    res.report = rep
    truth_params = cfg.get("true_params")
    if truth_params is not None:
        rep["true_params"] = truth_params
    noise = excite.sample_noise_cov(ds)
    avg = excite.period_average(ds)

    def finish():
        if out_dir:
            finalopt.write_report(p("report.json"), rep)

    try:
        # Step I
        s1 = cfg["step1"]
        frm, fits = _stage("bla", run_step1, ds, spec, s1, restart_rng(cfg.get("seeds", {"phases": 0, "noise": 0})))
        best = min(fits, key=lambda f: f.cost)
        res.frm, res.step1_fits = frm, fits
        res.bla_model = NllfrModel(spec, best.theta, PolyNonlinearity.none(spec.n_z, spec.n_w), ds.Ts,
                                   provenance={"stage": "bla", **best.report(list(spec.param_names))})
        rep["bla"] = {**best.report(list(spec.param_names)), "restarts": len(fits),
                      "converged": int(sum(f.converged for f in fits))}
        rep["nrmse_train"]["bla"] = nrmse_on(res.bla_model, ds)
        if test is not None:
            rep["nrmse_test"]["bla"] = nrmse_on(res.bla_model, test)
        res.stages_run.append("bla")
        rep["stages"].append("bla")
        if out_dir:
            bla.write_frm_csv(frm, p("frm.csv"))
            save_model(res.bla_model, p("model_bla.json"))
        if "restoring" not in stages:
            return res
        # Step II
        s2 = cfg["step2"]
        dl = res.bla_model.discrete
        qs = q_source(ds, noise)
        poly = nlfit.get_poly_spec(s2.get("poly", "odd3"))
        N0 = int(s2.get("N0", 100))
        rf = _stage("restoring", slidewin.infer_restoring_force, avg, dl, int(s2["H"]), float(s2["lambda"]),
                    N0, qs, theta_phys=best.theta)
        bf = _stage("restoring", nlfit.fit_beta, rf.dwz, poly)
        res.restoring, res.beta_fit = rf, bf
        res.initial_model = nlfit.assemble_initial_model(
            spec, best.theta, bf.nonlinearity, ds.Ts,
            provenance={"stage": "initial", "H": int(s2["H"]), "lambda": float(s2["lambda"]), "N0": N0,
                        "poly": poly.to_dict(), "bla_theta": [float(v) for v in best.theta]})
        rep["restoring"] = {"H": int(s2["H"]), "lambda": float(s2["lambda"]), "N0": N0,
                            "nonparam_nrmse": [float(v) for v in rf.nrmse],
                            "poly_nrmse": [float(v) for v in bf.nrmse],
                            "beta": [c.tolist() for c in bf.nonlinearity.coefficients]}
        rep["nrmse_train"]["initial"] = nrmse_on(res.initial_model, ds)
        if test is not None:
            rep["nrmse_test"]["initial"] = nrmse_on(res.initial_model, test)
        if s2.get("grid"):
            g = s2["grid"]
            res.grid = _stage("restoring", slidewin.grid_search, avg, dl, g["H"], g["lambda"], N0, poly, qs,
                              (ds.meta or {}).get("snr_db"))
            if out_dir:
                slidewin.write_grid_csv(res.grid, p("grid.csv"))
        res.stages_run.append("restoring")
        rep["stages"].append("restoring")
        if out_dir:
            slidewin.write_wz_csv(rf.dwz, p("dwz.csv"))
            nlfit.write_scatter_csv(rf.dwz, bf.nonlinearity, p("scatter.csv"))
            save_model(res.initial_model, p("model_initial.json"))
        if "final" not in stages:
            return res
        # Step III
        s3 = cfg["step3"]
        cs = _stage("final", finalopt.build_cost_spec, ds, res.initial_model, float(s3["gamma"]),
                    s3.get("N0"), noise)
        tt = None if test is None else (test.u.mean(axis=1)[0], test.y.mean(axis=1)[0])
        fr = _stage("final", finalopt.final_optimize, cs, None, LmConfig(max_iters=int(s3.get("max_iters", 100))),
                    tt)
        res.final = fr
        rep["final"] = {"gamma": cs.gamma, "N0": cs.N0, "status": fr.lm.status, "iterations": fr.lm.n_iter,
                        "cost": fr.lm.cost,
                        "theta_phys": dict(zip(spec.param_names, map(float, fr.model.theta_phys))),
                        "beta": [c.tolist() for c in fr.model.nonlinearity.coefficients]}
        rep["nrmse_train"]["final"] = nrmse_on(fr.model, ds)
        if test is not None:
            rep["nrmse_test"]["final"] = nrmse_on(fr.model, test)
        rep["parameters"] = {
            name: {"bla": float(best.theta[i]), "initial": float(res.initial_model.theta_phys[i]),
                   "final": float(fr.model.theta_phys[i]),
                   **({"true": truth_params[name]} if truth_params and name in truth_params else {})}
            for i, name in enumerate(spec.param_names)}
        res.stages_run.append("final")
        rep["stages"].append("final")
        if out_dir:
            extra = {"nrmse_train": fr.nrmse_trace}
            if fr.test_nrmse_trace:
                extra["nrmse_test"] = fr.test_nrmse_trace
            write_trace_csv(fr.lm, p("trace.csv"), fr.names, extra)
            save_model(fr.model, p("model_final.json"))
            rep["final"]["trace_csv"] = "trace.csv"
        return res
    finally:
        finish()


# ---------------------------------------------------------------- validation

def validation_data(model, ds, frm=None, N0=None):
    """Time-domain NRMSE, residual spectrum and simulated restoring force.

    ``frm`` (from training data) adds the noise and total distortion levels
    to the spectrum table.
    """
    if ds.n_u != model.spec.n_u or ds.n_y != model.spec.n_y:
        from .errors import CompatibilityError
        raise CompatibilityError(
            f"model is {model.spec.n_u}-in/{model.spec.n_y}-out, data are {ds.n_u}-in/{ds.n_y}-out")
    u = ds.u.mean(axis=1)
    y = ds.y.mean(axis=1)
    N0 = finalopt.auto_offset(model, ds.N) if N0 is None else N0
    sims = [steady_state_periodic(model, u[r], N0) for r in range(ds.R)]
    per = [excite.nrmse(y[r], s.y) for r, s in enumerate(sims)]
    K = ds.N // 2 + 1
    Y = numkit.dft(y, axis=1)[:, :K]
    E = Y - np.stack([numkit.dft(s.y, axis=0)[:K] for s in sims])
    spec_rows = {"k": np.arange(K), "f": np.arange(K) * ds.fs / ds.N,
                 "Y_db": 20 * np.log10(np.abs(Y).mean(axis=0)[:, 0] + 1e-300),
                 "E_db": 20 * np.log10(np.abs(E).mean(axis=0)[:, 0] + 1e-300)}
    if frm is not None:
        u_spec = np.abs(numkit.dft(u, axis=1)[:, frm.lines, 0]).mean(axis=0)
        for key, var in (("noise_db", frm.var_noise), ("total_db", frm.var_total)):
            col = np.full(K, np.nan)
            if var is not None:
                # FRM variance mapped to output spectrum level through |U|
                col[frm.lines] = 10 * np.log10(var[:, 0, 0] * u_spec ** 2 + 1e-300)
            spec_rows[key] = col
    force = {"r": np.concatenate([np.full(ds.N, r) for r in range(ds.R)]),
             "n": np.tile(np.arange(ds.N), ds.R)}
    Z = np.concatenate([s.z for s in sims])
    W = np.concatenate([s.w for s in sims])
    for j in range(Z.shape[1]):
        force[f"z_{j + 1}"] = Z[:, j]
    for j in range(W.shape[1]):
        force[f"w_{j + 1}"] = W[:, j]
    metrics = {"nrmse": float(np.mean(per)), "nrmse_per_realization": per, "N0": int(N0),
               "rmse": float(np.sqrt(np.mean((y - np.stack([s.y for s in sims])) ** 2)))}
    return metrics, spec_rows, force


def write_columns_csv(path, cols):
    names = list(cols)
    data = np.column_stack([np.asarray(cols[n], dtype=float) for n in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")
