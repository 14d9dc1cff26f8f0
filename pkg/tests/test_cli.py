import hashlib
import json

import pytest

from rsnpe import cli
from rsnpe.physics import flat_plate_power, linear_to_db
from rsnpe.simulator import RadarConfig

SMALL = [
    "--set", "data.n_primary=30",
    "--set", "data.n_reference=10",
    "--set", "data.n_train=240",
    "--set", "data.n_val=60",
    "--set", "train.max_epochs=2",
    "--set", "validate.n_test=25",
    "--set", "validate.L=10",
]  # fmt: skip
CP = ["--p-obs-db", "34.73", "--p-ref-db", "32.62", "--r-km", "300", "--r-ref-km", "250"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    codes = {}
    for cmd in ("generate", "train", "validate"):
        codes[cmd] = cli.main([cmd, "--out", str(out), *SMALL])
    codes["infer"] = cli.main(["infer", "--out", str(out), *SMALL, *CP, "--eps-ref", "2.0", "--eps-ref", "3.1", "--eps-ref", "4.0", "--n-samples", "500"])
    codes["plot"] = cli.main(["plot", "--out", str(out), *SMALL])
    return out, codes


def test_config_prints_defaults(capsys):
    assert cli.main(["config"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["radar"]["r_km"] == 5.0 and doc["data"]["n_train"] == 8000
    assert doc["train"]["batch_size"] == 1024 and doc["flow"]["n_transforms"] == 5


def test_config_file_and_override_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"radar": {"r_km": 10.0}, "data": {"n_primary": 7}}))
    assert cli.main(["config", "--config", str(cfg), "--set", "data.n_primary=9"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["radar"]["r_km"] == 10.0 and doc["data"]["n_primary"] == 9


@pytest.mark.parametrize(
    "override, fragment",
    [("radar.bogus=1", "radar.bogus: unknown"), ("radar.f_c_mhz=abc", "radar.f_c_mhz: expected a number"), ("radar.n_s=4", "radar:"), ("nodot=1", "section.key")],
)
def test_config_errors_name_the_field(override, fragment, capsys):
    assert cli.main(["config", "--set", override]) == cli.EXIT_ERROR
    assert fragment in capsys.readouterr().err


def test_missing_upstream_artifacts_name_the_producer(tmp_path, capsys):
    assert cli.main(["train", "--out", str(tmp_path)]) == cli.EXIT_ERROR
    assert "rsnpe generate" in capsys.readouterr().err
    assert cli.main(["infer", "--out", str(tmp_path), *CP, "--eps-ref", "3.1"]) == cli.EXIT_ERROR
    assert "rsnpe train" in capsys.readouterr().err
    assert cli.main(["validate", "--out", str(tmp_path)]) == cli.EXIT_ERROR
    assert "rsnpe train" in capsys.readouterr().err


def test_simulate_flat_plate_matches_analytic(tmp_path, capsys):
    args = ["simulate", "--out", str(tmp_path), "--eps", "4", "--sigma-m", "0", "--slope", "0", "--set", "radar.snr_db=null"]
    assert cli.main(args) == 0
    printed = float(capsys.readouterr().out.split()[2])
    cfg = RadarConfig.desk()
    assert abs(printed - linear_to_db(flat_plate_power(4.0, cfg.wavelength, cfg.altitude_m))) < 0.5
    first = digest(tmp_path / "simulate" / "rangeline.bin")
    assert cli.main(args) == 0
    assert digest(tmp_path / "simulate" / "rangeline.bin") == first
    meta = json.loads((tmp_path / "simulate" / "rangeline.json").read_text())
    assert meta["seed"] == 0 and "config_hash" in meta
    assert (tmp_path / "simulate" / "config.json").exists()


def test_simulate_outside_prior_gives_notice(tmp_path, capsys):
    assert cli.main(["simulate", "--out", str(tmp_path), "--eps", "20", "--sigma-m", "0", "--slope", "0"]) == 0
    assert "outside the prior" in capsys.readouterr().err


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["simulate", "--eps", "4", "--sigma-m", "0", "--slope", "0"]) == 0
    assert (tmp_path / "env" / "simulate" / "rangeline.bin").exists()


def test_pipeline_runs_and_writes_artifacts(pipeline):
    out, codes = pipeline
    assert codes["generate"] == 0 and codes["train"] == 0 and codes["plot"] == 0
    assert codes["validate"] in (cli.EXIT_OK, cli.EXIT_WARN)
    for rel in ("data/primary.csv", "data/train.csv", "model/flow.bin", "model/history.csv", "validate/report.json", "plots/rank_histograms.png", "plots/corner_posterior.png"):
        assert (out / rel).exists(), rel
    for d in ("data", "model", "validate", "infer", "plots"):
        assert (out / d / "config.json").exists()


def test_every_sidecar_carries_hash_and_seed(pipeline):
    out, _ = pipeline
    for rel in ("data/primary.json", "data/reference.json", "data/train.json", "data/val.json", "model/flow.json", "model/history.json", "validate/report.json", "infer/posterior_eps3.1.json"):
        doc = json.loads((out / rel).read_text())
        assert "config_hash" in doc and "seed" in doc, rel


def test_infer_sweep_outputs(pipeline):
    out, codes = pipeline
    assert codes["infer"] in (cli.EXIT_OK, cli.EXIT_WARN)
    h = [json.loads((out / "infer" / f"posterior_eps{e}.json").read_text())["h_used"] for e in ("2", "3.1", "4")]
    assert h[0] < h[1] < h[2]


def test_rerun_is_byte_identical(pipeline, tmp_path):
    out, _ = pipeline
    for cmd in ("generate", "train"):
        assert cli.main([cmd, "--out", str(tmp_path), *SMALL]) == 0
    for rel in ("data/primary.csv", "data/reference.csv", "data/train.csv", "data/val.csv", "model/history.csv", "model/flow.bin"):
        assert digest(out / rel) == digest(tmp_path / rel), rel


def test_threshold_breach_sets_exit_code(pipeline, capsys):
    out, _ = pipeline
    code = cli.main(["validate", "--out", str(out), *SMALL, "--set", "thresholds.ks_p_min=1.0"])
    assert code == cli.EXIT_WARN
    assert "KS p" in capsys.readouterr().err
    doc = json.loads((out / "validate" / "report.json").read_text())
    assert len(doc["warnings"]) >= 3


def test_plot_without_inputs_is_an_error(tmp_path, capsys):
    assert cli.main(["plot", "--out", str(tmp_path)]) == cli.EXIT_ERROR
    assert "rsnpe infer" in capsys.readouterr().err
