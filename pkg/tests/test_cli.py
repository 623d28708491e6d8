import json
import subprocess
import sys
from pathlib import Path

import pytest

from fallguard.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture(scope="module")
def smoke_cfg(tmp_path_factory):
    # a trimmed config so CLI tests stay fast
    path = tmp_path_factory.mktemp("cfg") / "test.toml"
    path.write_text(
        "[meta]\nschema_version = 1\n"
        "[datagen]\nn_trajectories = 8\nmax_len_s = 8.0\n"
        "[predictor]\nepochs = 2\nbatch = 4\n"
        "[ppo]\nn_envs = 4\nstage1_updates = 2\nstage2_updates = 2\n"
        "[eval]\nn_trials = 3\nhorizon_s = 0.5\n"
    )
    return str(path)


@pytest.fixture(scope="module")
def artifacts(tmp_path_factory, smoke_cfg):
    out = tmp_path_factory.mktemp("run")
    data = str(out / "d.fgd1")
    pred = str(out / "p.fgw1")
    pol = str(out / "s1.fgw1")
    assert main(["gen-data", "--config", smoke_cfg, "--out", data,
                 "--seed", "7"]) == 0
    assert main(["train-predictor", "--config", smoke_cfg, "--data", data,
                 "--out", pred, "--seed", "7"]) == 0
    assert main(["train-policy", "--config", smoke_cfg, "--stage", "1",
                 "--out", pol, "--seed", "7"]) == 0
    return {"dir": out, "data": data, "pred": pred, "policy": pol,
            "cfg": smoke_cfg}


def test_missing_config_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", "x.fgd1"])
    assert exc.value.code == 2


def test_unknown_subcommand_usage():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate", "--config", "x"])
    assert exc.value.code == 2


def test_config_file_missing_exit3(tmp_path):
    rc = main(["gen-data", "--config", str(tmp_path / "nope.toml"),
               "--out", str(tmp_path / "d.fgd1")])
    assert rc == 3


def test_unknown_config_key_exit3(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[predictor]\nfooo = 1\n")
    rc = main(["gen-data", "--config", str(bad),
               "--out", str(tmp_path / "d.fgd1")])
    assert rc == 3


def test_wrong_schema_version_exit3(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[meta]\nschema_version = 99\n")
    rc = main(["gen-data", "--config", str(bad),
               "--out", str(tmp_path / "d.fgd1")])
    assert rc == 3


def test_gen_data_manifest(artifacts):
    manifest = Path(artifacts["data"] + ".manifest.json")
    assert manifest.exists()
    meta = json.loads(manifest.read_text())
    assert meta["subcommand"] == "gen-data"
    assert meta["seed"] == 7
    assert "config" in meta["inputs"]


def test_eval_predictor_csv(artifacts, tmp_path):
    csv_path = str(tmp_path / "pred.csv")
    rc = main(["eval-predictor", "--config", artifacts["cfg"],
               "--data", artifacts["data"], "--weights", artifacts["pred"],
               "--csv", csv_path])
    assert rc == 0
    header = Path(csv_path).read_text().splitlines()[0]
    assert header == "config_id,t1_rule,t2_offset_s,masked,far,lt_mean_s,miss_rate"


def test_eval_predictor_requires_weights_or_ablate(artifacts, tmp_path):
    rc = main(["eval-predictor", "--config", artifacts["cfg"],
               "--data", artifacts["data"],
               "--csv", str(tmp_path / "x.csv")])
    assert rc == 3


def test_stage2_without_prereqs_exit3(artifacts, tmp_path):
    rc = main(["train-policy", "--config", artifacts["cfg"], "--stage", "2",
               "--out", str(tmp_path / "s2.fgw1")])
    assert rc == 3


def test_evaluate_and_report(artifacts, tmp_path):
    csv_path = str(artifacts["dir"] / "eval.csv")
    rc = main(["evaluate", "--config", artifacts["cfg"],
               "--policy", artifacts["policy"],
               "--data", artifacts["data"], "--predictor", artifacts["pred"],
               "--n", "3", "--csv", csv_path, "--seed", "5"])
    assert rc == 0
    lines = Path(csv_path).read_text().splitlines()
    assert lines[0].startswith("row_kind,controller,tau_max_mean")
    assert any(line.startswith("metrics,damping") for line in lines)
    assert any(line.startswith("improvement_vs_damping") for line in lines)

    rc = main(["report", "--config", artifacts["cfg"],
               "--dir", str(artifacts["dir"])])
    assert rc == 0
    summary = artifacts["dir"] / "summary.csv"
    assert summary.exists()
    assert "source" in summary.read_text().splitlines()[0]


def test_score_csv(artifacts, tmp_path):
    csv_path = str(tmp_path / "score.csv")
    rc = main(["score", "--config", artifacts["cfg"],
               "--data", artifacts["data"], "--csv", csv_path])
    assert rc == 0
    lines = Path(csv_path).read_text().splitlines()
    assert lines[0] == "trajectory,frame,contact,joint,torque,regulation,total"
    assert len(lines) > 10


def test_console_entrypoint_usage():
    proc = subprocess.run(
        [sys.executable, "-m", "fallguard.cli"],
        capture_output=True, text=True)
    assert proc.returncode == 2
