import json
import subprocess
import sys

import pytest

from corrstab.cli import main
from corrstab.config import load_config
from corrstab.correlation import dataset_corr_value
from corrstab.io import read_dataset
from corrstab.model import load_checkpoint
from corrstab.stability import StabilityConfig, stability_index
from corrstab.trajectory import parse_dump

SMALL = """
seed: 3
data:
  n_frames: 3
  generation:
    equil_steps: 20
    stride: 5
model:
  n_layers: 2
  dim: 4
train:
  epochs: 2
  n_val: 1
  batch_size: 2
md:
  dt: 0.5
  steps: 20
  dump_interval: 5
  T_set: 1200
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.yaml").write_text(SMALL)
    return root


def run(workdir, *argv):
    return main([*argv, "--config", str(workdir / "small.yaml")])


@pytest.fixture(scope="module")
def datagen(workdir):
    out = workdir / "data"
    assert run(workdir, "datagen", "--ratios", "1:2,1:1.55,1:1.1", "--out", str(out)) == 0
    return out


@pytest.fixture(scope="module")
def trained(workdir, datagen):
    out = workdir / "base"
    assert run(workdir, "train", "--data", str(datagen / "data_1-2.xyz"), "--corr", "off", "--out", str(out)) == 0
    return out


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert main(["train", "--no-such-flag"]) == 2
    assert main([]) == 2
    proc = subprocess.run([sys.executable, "-m", "corrstab.cli", "analyze", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "--mode" in proc.stdout


def test_datagen_writes_three_files(datagen, capsys):
    names = sorted(p.name for p in datagen.glob("data_*"))
    assert names == ["data_1-1.1.xyz", "data_1-1.55.xyz", "data_1-2.xyz"]
    ds = read_dataset(datagen / "data_1-1.1.xyz")
    assert len(ds) == 3 and ds.composition == "1:1.1"
    assert sorted(set(ds[0].species.tolist())) == [1, 2]
    assert (ds[0].species == 1).sum() == 46


def test_datagen_is_deterministic(workdir, datagen):
    again = workdir / "again"
    assert run(workdir, "datagen", "--ratios", "1:2", "--out", str(again)) == 0
    assert (again / "data_1-2.xyz").read_bytes() == (datagen / "data_1-2.xyz").read_bytes()


def test_datagen_default_ratio(workdir):
    out = workdir / "default"
    assert run(workdir, "datagen", "--frames", "0", "--out", str(out)) == 0
    assert [p.name for p in out.glob("data_*")] == ["data_1-2.xyz"]


def test_train_baseline_outputs(trained):
    cfg = load_config(trained / "train_config.yaml")
    assert not cfg.train.corr_enabled
    report = json.loads((trained / "train_report.json").read_text())
    assert report["corr_enabled"] is False and report["epochs"] == 2
    for name in ("metrics.csv", "metrics.png", "checkpoint.json", "best.json"):
        assert (trained / name).exists()
    rows = (trained / "metrics.csv").read_text().splitlines()
    assert len(rows) == 3
    assert all(row.split(",")[4] == "0.0" for row in rows[1:])  # c_corr stays zero


def test_train_rejects_too_small_dataset(workdir, datagen, capsys):
    small = workdir / "one.yaml"
    small.write_text(SMALL.replace("n_val: 1", "n_val: 5"))
    code = main(["train", "--data", str(datagen / "data_1-2.xyz"), "--config", str(small),
                 "--out", str(workdir / "x")])
    assert code == 1
    assert "n_val" in capsys.readouterr().err


def test_corr_matches_library(workdir, datagen, trained, capsys):
    out = workdir / "corr"
    data = datagen / "data_1-2.xyz"
    assert run(workdir, "corr", "--checkpoint", str(trained / "best.json"), "--data", str(data),
               "--out", str(out)) == 0
    blob = json.loads((out / "corr.json").read_text())
    params, _, _ = load_checkpoint(trained / "best.json")
    cfg = load_config(workdir / "small.yaml")
    assert blob["corr_value"] == dataset_corr_value(params, read_dataset(data), cfg.corr).value
    assert (out / "corr_0.png").exists()


def test_simulate_model_then_analyze(workdir, datagen, trained, capsys):
    sim = workdir / "sim"
    code = run(workdir, "simulate", "--checkpoint", str(trained / "best.json"),
               "--init", str(datagen / "data_1-2.xyz"), "--out", str(sim))
    assert code in (0, 3)  # an untrained toy model may legitimately crash
    dump = sim / "traj.dump"
    assert dump.exists()
    capsys.readouterr()
    out = workdir / "ana"
    assert run(workdir, "analyze", str(dump), "--rdf", "--rdf-rmax", "4.0", "--bins", "20", "--out", str(out)) == 0
    printed = capsys.readouterr().out
    report = json.loads((out / "traj_stability.json").read_text())
    api = stability_index(parse_dump(dump, masses=(178.49, 16.0)), StabilityConfig(T_set=1200, n_species=2))
    assert report["s_index"] == api.s_index
    assert f"s_index={api.s_index:.6f}" in printed
    for name in ("traj_stability.csv", "traj_stability.png", "traj_rdf_1-2.csv"):
        assert (out / name).exists()


def test_simulate_reference_and_crash_exit_code(workdir, capsys):
    ok = workdir / "ref"
    assert run(workdir, "simulate", "--potential", "ref", "--composition", "1:2", "--out", str(ok)) == 0
    assert len(parse_dump(ok / "traj.dump").snapshots) == 5
    capsys.readouterr()
    bad = workdir / "crash"
    code = run(workdir, "simulate", "--potential", "ref", "--inject-nan-at", "7", "--out", str(bad))
    assert code == 3
    assert "crash_step=7" in capsys.readouterr().out
    rec = parse_dump(bad / "traj.dump")
    assert rec.crashed and rec.crash_step == 7
    out = workdir / "crash_ana"
    assert run(workdir, "analyze", str(bad / "traj.dump"), "--out", str(out)) == 0
    assert json.loads((out / "traj_stability.json").read_text())["s_index"] == 0.0


def test_rdf_command(workdir, capsys):
    ref = workdir / "ref2"
    assert run(workdir, "simulate", "--potential", "ref", "--composition", "1:2", "--out", str(ref)) == 0
    dump = str(ref / "traj.dump")
    out = workdir / "rdf"
    assert run(workdir, "rdf", dump, dump, "--labels", "a,b", "--rdf-rmax", "4.0", "--bins", "8",
               "--out", str(out)) == 0
    lines = (out / "rdf_1-2.csv").read_text().splitlines()
    assert lines[0] == "r,a,b" and len(lines) == 9
    assert all(row.split(",")[1] == row.split(",")[2] for row in lines[1:])
    assert run(workdir, "rdf", dump, "--labels", "a,b", "--out", str(out)) == 1


def test_simulate_without_checkpoint_is_an_error(workdir, capsys):
    assert run(workdir, "simulate", "--out", str(workdir / "nock")) == 1
    assert "--checkpoint" in capsys.readouterr().err
