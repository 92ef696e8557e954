"""Command-line entry point: ``nllfr generate|identify|validate|resample|grid``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import excite, pipeline
from .errors import ConfigError, NllfrError, StageError
from .finalopt import write_report
from .model import load_model

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2, 3


def _config(args):
    if args.config:
        if not os.path.isfile(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        with open(args.config) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
    elif args.preset:
        raw = {}
    else:
        raise ConfigError("give --config or --preset")
    if args.preset:
        raw = {"preset": args.preset, **raw}
    cfg = pipeline.resolve_config(raw)
    for key in ("dataset", "test_dataset"):
        if key in cfg and not os.path.isfile(os.path.join(cfg[key], excite.MANIFEST)):
            raise ConfigError(f"{key}: no {excite.MANIFEST} under {cfg[key]}")
    return cfg


def _require_dataset(path, what="dataset"):
    if not os.path.isfile(os.path.join(path, excite.MANIFEST)):
        raise ConfigError(f"{what}: no {excite.MANIFEST} under {path}")
    return excite.load_dataset(path)


def _out_dir(args, cfg=None):
    out = args.out or (cfg or {}).get("output_dir")
    if not out:
        raise ConfigError("no output directory (use --out or output_dir)")
    os.makedirs(out, exist_ok=True)
    return out


def cmd_generate(args):
    cfg = _config(args)
    if "synthetic" not in cfg:
        raise ConfigError("generate needs a synthetic block")
    # design errors surface before anything is written
    pipeline.design_from(cfg["synthetic"]).validate()
    data = pipeline.generate_datasets(cfg)
    out = _out_dir(args, cfg)
    for label, (tr, te) in data.items():
        excite.save_dataset(tr, os.path.join(out, label, "train"))
        excite.save_dataset(te, os.path.join(out, label, "test"))
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {', '.join(sorted(data))} under {out}")
    return EXIT_OK


def _datasets_for(cfg, args):
    data = args.data or cfg.get("dataset")
    test = args.test or cfg.get("test_dataset")
    if data:
        ds = _require_dataset(data)
        te = _require_dataset(test, "test dataset") if test else None
        return ds, te
    if "synthetic" not in cfg:
        raise ConfigError("no dataset path and no synthetic block")
    snr = cfg.get("snr_db", cfg["synthetic"].get("snr_db", [None])[0])
    data = pipeline.generate_datasets({**cfg, "synthetic": {**cfg["synthetic"], "snr_db": [snr]}})
    return data[pipeline.snr_label(snr)]


def cmd_identify(args):
    cfg = _config(args)
    if args.stages:
        cfg["stages"] = pipeline.STAGES[: pipeline.STAGES.index(args.stages) + 1]
    if args.grid:
        H, lam = args.grid
        cfg["step2"]["grid"] = {"H": [int(v) for v in H.split(",")],
                                "lambda": [float(v) for v in lam.split(",")]}
    ds, te = _datasets_for(cfg, args)
    out = _out_dir(args, cfg)
    res = pipeline.identify(ds, cfg, out, test=te)
    rep = res.report
    print("stages:", ", ".join(res.stages_run))
    for key in ("nrmse_train", "nrmse_test"):
        if rep.get(key):
            print(f"{key}: " + ", ".join(f"{k}={v:.4g}%" for k, v in rep[key].items()))
    return EXIT_OK


def cmd_validate(args):
    model = load_model(args.model)
    ds = _require_dataset(args.data)
    frm = None
    if args.train:
        from .bla import estimate_bla
        frm = estimate_bla(_require_dataset(args.train, "training dataset"))
    metrics, spec_rows, force = pipeline.validation_data(model, ds, frm, args.N0)
    out = _out_dir(args)
    write_report(os.path.join(out, "metrics.json"), {**metrics, "model": os.path.abspath(args.model),
                                                      "dataset": os.path.abspath(args.data)})
    pipeline.write_columns_csv(os.path.join(out, "residual_spectrum.csv"), spec_rows)
    pipeline.write_columns_csv(os.path.join(out, "restoring_force.csv"), force)
    print(f"NRMSE {metrics['nrmse']:.6g}%")
    return EXIT_OK


def cmd_resample(args):
    ds = _require_dataset(args.data)
    out = _out_dir(args)
    excite.save_dataset(pipeline.resample_dataset(ds, args.factor), out)
    print(f"resampled x{args.factor}: fs {ds.fs:g} -> {ds.fs * args.factor:g} Hz, N {ds.N} -> {ds.N * args.factor}")
    return EXIT_OK


def cmd_grid(args):
    cfg = _config(args)
    g = cfg["step2"].get("grid") or {}
    H = [int(v) for v in args.H.split(",")] if args.H else g.get("H")
    lam = [float(v) for v in args.lam.split(",")] if args.lam else g.get("lambda")
    if not H or not lam:
        raise ConfigError("grid needs H and lambda values (--H/--lambda or step2.grid)")
    cfg["step2"]["grid"] = {"H": H, "lambda": lam}
    cfg["stages"] = ["bla", "restoring"]
    ds, _ = _datasets_for(cfg, args)
    out = _out_dir(args, cfg)
    res = pipeline.identify(ds, cfg, out)
    h, l, v = res.grid.best()
    print(f"best polynomial-fit NRMSE {v:.4g}% at H={h}, lambda={l:g}")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="nllfr", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cfg_args(p):
        p.add_argument("--config", help="JSON pipeline configuration")
        p.add_argument("--preset", choices=sorted(pipeline.PRESETS))
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("generate", help="write synthetic train/test datasets")
    cfg_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("identify", help="run the identification stages")
    cfg_args(p)
    p.add_argument("--data", help="training dataset directory")
    p.add_argument("--test", help="test dataset directory")
    p.add_argument("--stages", choices=pipeline.STAGES, help="last stage to run")
    p.add_argument("--grid", nargs=2, metavar=("H_LIST", "LAMBDA_LIST"),
                   help="comma-separated H and lambda values for an extra grid search")
    p.set_defaults(func=cmd_identify)

    p = sub.add_parser("validate", help="score a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--train", help="training dataset, adds noise/distortion levels to the spectrum")
    p.add_argument("--N0", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("resample", help="periodic cubic-spline upsampling")
    p.add_argument("--data", required=True)
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("grid", help="H x lambda grid search of the restoring-force step")
    cfg_args(p)
    p.add_argument("--data")
    p.add_argument("--H", help="comma-separated horizons")
    p.add_argument("--lambda", dest="lam", help="comma-separated regularisation weights")
    p.set_defaults(func=cmd_grid, test=None)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"nllfr {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"nllfr {args.command}: stage {exc.stage} failed: {exc.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (NllfrError, OSError, ValueError) as exc:
        print(f"nllfr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
