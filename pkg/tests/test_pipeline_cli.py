import copy
import json
import os

import numpy as np
import pytest

from nllfr import cli, excite, numkit, pipeline
from nllfr.errors import CompatibilityError, ConfigError, StageError
from nllfr.model import CHAIN2DOF, NllfrModel, load_model
from nllfr.nlfit import odd7_nocross

SMALL = {
    "preset": "duffing",
    "synthetic": {"N": 1024, "R": 2, "P": 2, "snr_db": [40]},
    "step1": {"restarts": 3},
    "step3": {"max_iters": 5},
}


def small_cfg(**over):
    cfg = copy.deepcopy(SMALL)
    cfg.update(over)
    return cfg


@pytest.fixture(scope="module")
def small_data():
    return pipeline.generate_datasets(pipeline.resolve_config(SMALL))["snr_40"]


@pytest.fixture(scope="module")
def small_run(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    train, test = small_data
    res = pipeline.identify(train, pipeline.resolve_config(SMALL), str(out), test=test)
    return res, out


class TestConfig:
    def test_preset_merge(self):
        cfg = pipeline.resolve_config(SMALL)
        assert cfg["synthetic"]["N"] == 1024 and cfg["synthetic"]["fs"] == 128
        assert cfg["step2"]["H"] == 10 and cfg["step1"]["restarts"] == 3
        assert "preset" not in cfg

    def test_presets_valid(self):
        for name in pipeline.PRESETS:
            pipeline.resolve_config({"preset": name})

    @pytest.mark.parametrize("bad,where", [
        ({"step2": {"H": 0}}, "step2/H"),
        ({"step2": {"lambda": -1.0}}, "step2/lambda"),
        ({"synthetic": {"R": "two"}}, "synthetic/R"),
        ({"bogus": 1}, "<root>"),
        ({"stages": ["bla", "nope"]}, "stages/1"),
    ])
    def test_schema_errors_name_the_path(self, bad, where):
        with pytest.raises(ConfigError, match=where):
            pipeline.resolve_config(small_cfg(**bad))

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="unknown preset"):
            pipeline.resolve_config({"preset": "van_der_pol"})

    def test_load_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(SMALL))
        assert pipeline.load_config(p)["synthetic"]["R"] == 2
        p.write_text("{not json")
        with pytest.raises(ConfigError, match="not valid JSON"):
            pipeline.load_config(p)


class TestSynthetic:
    def test_deterministic(self):
        cfg = pipeline.resolve_config(SMALL)
        a, b = pipeline.generate_datasets(cfg), pipeline.generate_datasets(cfg)
        for key in a:
            for x, y in zip(a[key], b[key]):
                np.testing.assert_array_equal(x.y, y.y)
                np.testing.assert_array_equal(x.u, y.u)

    def test_noise_independent_of_level_order(self):
        cfg = pipeline.resolve_config(small_cfg(synthetic={"N": 512, "R": 1, "P": 2, "snr_db": [40, 20]}))
        rev = pipeline.resolve_config(small_cfg(synthetic={"N": 512, "R": 1, "P": 2, "snr_db": [20, 40]}))
        a, b = pipeline.generate_datasets(cfg), pipeline.generate_datasets(rev)
        np.testing.assert_array_equal(a["snr_20"][0].y, b["snr_20"][0].y)

    def test_train_and_test_differ(self, small_data):
        train, test = small_data
        assert test.R == 1 and test.P == 1
        assert not np.allclose(train.u[0, 0], test.u[0, 0])
        assert train.meta["role"] == "train" and test.meta["snr_db"] == 40.0

    @pytest.mark.parametrize("snr,label", [(None, "snr_inf"), (40, "snr_40"), (12.5, "snr_12.5")])
    def test_labels(self, snr, label):
        assert pipeline.snr_label(snr) == label


class TestResample:
    def test_factor_one_identity(self, small_data):
        ds = small_data[1]
        assert pipeline.resample_dataset(ds, 1) is ds

    def test_keeps_original_samples(self, small_data):
        ds = small_data[1]
        up = pipeline.resample_dataset(ds, 4)
        assert up.N == 4 * ds.N and up.fs == 4 * ds.fs
        np.testing.assert_allclose(up.y[:, :, ::4], ds.y, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(pipeline.downsample_output(up.u[0, 0], 4), ds.u[0, 0], atol=1e-12)
        assert up.meta["resampled"] == {"factor": 4, "fs_original": ds.fs, "N_original": ds.N}

    def test_in_band_spectrum(self):
        # a band-limited multisine keeps its excited lines through x20 upsampling
        design = excite.MultisineDesign.band(N=256, fs=64.0, f_max=5.0, rms=1.0)
        u = excite.generate_multisine(design, np.random.default_rng(0))
        up = numkit.resample_spline(u, 20, periodic=True, axis=0)
        U, Uup = numkit.dft(u), numkit.dft(up) / 20
        err = np.abs(Uup[design.lines] - U[design.lines]) / np.abs(U[design.lines])
        assert np.max(err) < 0.01

    def test_bad_factor(self, small_data):
        with pytest.raises(ValueError):
            pipeline.resample_dataset(small_data[1], 0)


class TestIdentify:
    def test_all_stages_and_artifacts(self, small_run):
        res, out = small_run
        assert res.stages_run == ["bla", "restoring", "final"]
        for name in ("frm.csv", "model_bla.json", "dwz.csv", "dwz.csv.json", "scatter.csv",
                     "model_initial.json", "trace.csv", "model_final.json", "report.json"):
            assert (out / name).is_file(), name
        rep = json.loads((out / "report.json").read_text())
        assert set(rep["nrmse_test"]) == {"bla", "initial", "final"}
        assert rep["nrmse_test"]["final"] < rep["nrmse_test"]["bla"]
        assert rep["parameters"]["k"]["true"] == 100

    def test_saved_model_reproduces_report(self, small_run, small_data):
        res, out = small_run
        model = load_model(out / "model_final.json")
        metrics, spectrum, force = pipeline.validation_data(model, small_data[0])
        rep = json.loads((out / "report.json").read_text())
        assert metrics["nrmse"] == pytest.approx(rep["nrmse_train"]["final"], rel=1e-10)
        assert len(spectrum["k"]) == small_data[0].N // 2 + 1
        assert len(force["w_1"]) == small_data[0].R * small_data[0].N

    def test_report_deterministic(self, small_run, small_data, tmp_path):
        _, out = small_run
        pipeline.identify(small_data[0], pipeline.resolve_config(SMALL), str(tmp_path), test=small_data[1])
        assert (tmp_path / "report.json").read_text() == (out / "report.json").read_text()

    def test_stage_gating(self, small_data, tmp_path):
        res = pipeline.identify(small_data[0], pipeline.resolve_config(small_cfg(stages=["bla"])), str(tmp_path))
        assert res.stages_run == ["bla"] and res.initial_model is None
        assert res.model is res.bla_model
        assert not (tmp_path / "dwz.csv").exists()

    def test_stage_failure_still_writes_report(self, small_data, tmp_path):
        cfg = pipeline.resolve_config(small_cfg(step2={"lambda": 0.0}))
        with pytest.raises(StageError) as ei:
            pipeline.identify(small_data[0], cfg, str(tmp_path))
        assert ei.value.stage == "restoring"
        assert json.loads((tmp_path / "report.json").read_text())["stages"] == ["bla"]

    def test_validation_mismatch(self, small_data):
        model = NllfrModel(CHAIN2DOF, [2, 1, 5, 2, 800, 600], odd7_nocross().to_nonlinearity(), 1 / 128)
        ds = small_data[1]
        with pytest.raises(CompatibilityError):
            pipeline.validation_data(model, ds.with_(y=np.concatenate([ds.y, ds.y], axis=3)))


class TestCli:
    def test_generate_identify_validate(self, tmp_path, capsys):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps(small_cfg(synthetic={"N": 512, "R": 2, "P": 2, "snr_db": [40]},
                                             step1={"restarts": 2}, step3={"max_iters": 2})))
        gen = tmp_path / "gen"
        assert cli.main(["generate", "--config", str(cfgp), "--out", str(gen)]) == cli.EXIT_OK
        assert (gen / "snr_40" / "train" / excite.MANIFEST).is_file()
        run = tmp_path / "run"
        rc = cli.main(["identify", "--config", str(cfgp), "--data", str(gen / "snr_40" / "train"),
                       "--test", str(gen / "snr_40" / "test"), "--out", str(run)])
        assert rc == cli.EXIT_OK
        assert "nrmse_test" in capsys.readouterr().out
        val = tmp_path / "val"
        rc = cli.main(["validate", "--model", str(run / "model_final.json"), "--data",
                       str(gen / "snr_40" / "train"), "--train", str(gen / "snr_40" / "train"), "--out", str(val)])
        assert rc == cli.EXIT_OK
        metrics = json.loads((val / "metrics.json").read_text())
        rep = json.loads((run / "report.json").read_text())
        assert metrics["nrmse"] == pytest.approx(rep["nrmse_train"]["final"], rel=1e-10)
        head = (val / "residual_spectrum.csv").read_text().splitlines()[0]
        assert head == "k,f,Y_db,E_db,noise_db,total_db"

    def test_generate_byte_identical(self, tmp_path):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps(small_cfg(synthetic={"N": 256, "R": 1, "P": 2, "snr_db": [20]})))
        for d in ("a", "b"):
            assert cli.main(["generate", "--config", str(cfgp), "--out", str(tmp_path / d)]) == 0
        for root, _, files in os.walk(tmp_path / "a"):
            for f in files:
                pa = os.path.join(root, f)
                pb = pa.replace(str(tmp_path / "a"), str(tmp_path / "b"))
                with open(pa, "rb") as fa, open(pb, "rb") as fb:
                    assert fa.read() == fb.read(), pa

    def test_resample(self, tmp_path, small_data):
        excite.save_dataset(small_data[1], tmp_path / "d")
        assert cli.main(["resample", "--data", str(tmp_path / "d"), "--factor", "3",
                         "--out", str(tmp_path / "u")]) == 0
        assert excite.load_dataset(tmp_path / "u").N == 3 * small_data[1].N

    def test_config_error_exit(self, tmp_path, capsys):
        rc = cli.main(["identify", "--preset", "duffing", "--data", str(tmp_path / "missing"),
                       "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_CONFIG
        assert "config error" in capsys.readouterr().err

    def test_missing_config_source(self, tmp_path):
        assert cli.main(["generate", "--out", str(tmp_path)]) == cli.EXIT_CONFIG

    def test_stage_error_exit(self, tmp_path, small_data, capsys):
        excite.save_dataset(small_data[0], tmp_path / "d")
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps(small_cfg(step2={"lambda": 0.0})))
        rc = cli.main(["identify", "--config", str(cfgp), "--data", str(tmp_path / "d"), "--out", str(tmp_path / "o")])
        assert rc == cli.EXIT_STAGE
        assert "stage restoring failed" in capsys.readouterr().err

    def test_stages_flag(self, tmp_path, small_data):
        excite.save_dataset(small_data[0], tmp_path / "d")
        rc = cli.main(["identify", "--config", _write(tmp_path, SMALL), "--data", str(tmp_path / "d"),
                       "--stages", "bla", "--out", str(tmp_path / "o")])
        assert rc == 0
        assert json.loads((tmp_path / "o" / "report.json").read_text())["stages"] == ["bla"]

    def test_grid(self, tmp_path, small_data, capsys):
        excite.save_dataset(small_data[0], tmp_path / "d")
        rc = cli.main(["grid", "--config", _write(tmp_path, SMALL), "--data", str(tmp_path / "d"),
                       "--H", "5,10", "--lambda", "1e-6,1e-4", "--out", str(tmp_path / "o")])
        assert rc == 0
        assert len((tmp_path / "o" / "grid.csv").read_text().splitlines()) == 5
        assert "best polynomial-fit NRMSE" in capsys.readouterr().out


def _write(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)
