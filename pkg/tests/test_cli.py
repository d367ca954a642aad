import json
import os

import numpy as np
import pytest

from ophmm import io as fio
from ophmm.cli import parse_compressions, run
from ophmm.errors import ConfigError


def call(*argv):
    return run([str(a) for a in argv])


def read(path):
    with open(path) as fh:
        return fh.read()


def rows(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    return fio.read_csv_rows(path, header)


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert call("simulate", "--protocol", "linear-track", "--T", 300, "--seed", 1,
                "--out", d) == 0
    return d


def test_simulate_outputs_and_manifest(sim_dir):
    for name in ("spikes.csv", "positions.csv", "states.csv", "session.json", "grid.json",
                 "model_true.json", "manifest.json"):
        assert (sim_dir / name).exists()
    man = json.loads(read(sim_dir / "manifest.json"))
    assert man["subcommand"] == "simulate" and man["seed"] == 1
    for entry in man["outputs"]:
        assert entry["sha256"] == fio.sha256(sim_dir / entry["path"])
    assert not [p for p in os.listdir(sim_dir) if p.startswith(".partial-")]
    states = fio.read_csv_rows(sim_dir / "states.csv", ["t", "state", "label"])
    assert len(states) == 300 and min(int(r[1]) for r in states) >= 1


def test_simulate_is_deterministic(sim_dir, tmp_path):
    assert call("simulate", "--protocol", "linear-track", "--T", 300, "--seed", 1,
                "--out", tmp_path) == 0
    for name in ("spikes.csv", "positions.csv", "states.csv"):
        assert read(tmp_path / name) == read(sim_dir / name)


def fit_args(sim_dir, out, seed=3):
    return ("fit", "--spikes", sim_dir / "spikes.csv", "--positions", sim_dir / "positions.csv",
            "--grid", sim_dir / "grid.json", "--dt", 0.1, "--duration", 30.0, "--H", 16,
            "--kappa-bar", 5, "--seed", seed, "--out", out)


def test_fit_is_reproducible_for_a_seed(sim_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert call(*fit_args(sim_dir, a)) == 0
    assert call(*fit_args(sim_dir, b), "--threads", 1) == 0
    assert read(a / "model.json") == read(b / "model.json")
    fit = json.loads(read(a / "fit.json"))
    assert 1 <= fit["kappa_hat"] <= 5 and fit["T"] == 300
    kp = fio.read_csv_rows(a / "kappa_posterior.csv", ["k", "p"])
    assert abs(sum(float(r[1]) for r in kp) - 1.0) < 1e-9
    model = json.loads(read(a / "model.json"))
    assert model["kappa"] == fit["kappa_hat"] == len(model["xi"])


def test_bin_and_decode_round_trip(sim_dir, tmp_path):
    assert call("bin", "--spikes", sim_dir / "spikes.csv", "--positions",
                sim_dir / "positions.csv", "--grid", sim_dir / "grid.json", "--dt", 0.1,
                "--duration", 30.0, "--out", tmp_path / "b") == 0
    binned = rows(tmp_path / "b" / "binned.csv")
    truth = fio.read_csv_rows(sim_dir / "states.csv", ["t", "state", "label"])
    assert len(binned) == 300
    assert [r[1] for r in binned] == [r[2] for r in truth]
    assert call("decode", "--spikes", sim_dir / "spikes.csv", "--positions",
                sim_dir / "positions.csv", "--grid", sim_dir / "grid.json", "--dt", 0.1,
                "--duration", 30.0, "--model", sim_dir / "model_true.json",
                "--method", "op-map", "--posterior-matrix", "--out", tmp_path / "d") == 0
    met = json.loads(read(tmp_path / "d" / "metrics.json"))
    assert met["median_error_px"] >= 0.0
    post = fio.read_matrix_binary(tmp_path / "d" / "posterior.bin")
    assert post.shape[0] == 300 and np.allclose(post.sum(1), 1.0)


def test_replay_pipeline(sim_dir, tmp_path):
    r = tmp_path / "r"
    assert call("simulate-replay", "--protocol", "linear-track", "--T", 2000,
                "--n-events", 5, "--seed", 4, "--out", r) == 0
    assert call("detect-replay", "--spikes", r / "spikes.csv", "--grid", r / "grid.json",
                "--model", r / "model_true.json", "--templates", r / "templates.json",
                "--dt", 0.1, "--duration", 200.0, "--compressions", "1",
                "--out", tmp_path / "e") == 0
    assert len(rows(tmp_path / "e" / "events.csv")) >= 1
    assert call("evaluate", "--events", tmp_path / "e" / "events.csv", "--ledger",
                r / "ledger.json", "--out", tmp_path / "v") == 0
    ev = json.loads(read(tmp_path / "v" / "evaluation.json"))
    assert ev["planted"] == 10
    roc = rows(tmp_path / "v" / "roc.csv")
    fps = [int(x[2]) for x in roc]
    assert fps == sorted(fps, reverse=True)


def test_config_file_and_flag_priority(sim_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"protocol": "linear-track", "T": 50, "seed": 2}))
    assert call("simulate", "--config", cfg, "--out", tmp_path / "a") == 0
    assert len(rows(tmp_path / "a" / "states.csv")) == 50
    assert call("simulate", "--config", cfg, "--T", 20, "--out", tmp_path / "b") == 0
    assert len(rows(tmp_path / "b" / "states.csv")) == 20


def test_exit_codes(sim_dir, tmp_path, capsys):
    assert call("simulate", "--protocol", "linear-track", "--out", tmp_path) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["exit_code"] == 2 and "seed" in err["message"]
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"protocol": "linear-track", "seed": 1, "bogus": 3}))
    assert call("simulate", "--config", cfg, "--out", tmp_path) == 2
    assert call("bin", "--spikes", tmp_path / "missing.csv", "--dt", 0.1,
                "--out", tmp_path) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("cell_id,time_s\n0,abc\n")
    assert call("bin", "--spikes", bad, "--dt", 0.1, "--out", tmp_path) == 3
    assert call("detect-replay", "--spikes", sim_dir / "spikes.csv", "--grid",
                sim_dir / "grid.json", "--model", sim_dir / "model_true.json",
                "--templates", tmp_path / "none.json", "--dt", 0.1, "--compressions", "0",
                "--out", tmp_path) in (2, 3)
    assert not [p for p in os.listdir(tmp_path) if p.startswith(".partial-")]


def test_parse_compressions():
    assert parse_compressions("1-3,5") == [1, 2, 3, 5]
    assert parse_compressions([2, 2.0, 1]) == [1, 2]
    for bad in ("0", "1.5", "x", ""):
        with pytest.raises(ConfigError):
            parse_compressions(bad)
