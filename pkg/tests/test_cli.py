import json
import os

import numpy as np
import pytest

from dribblesim.cli import main
from dribblesim.config import Config, ConfigError, config_from_dict, load_config


def test_unknown_flag_nonzero_exit(capsys):
    rc = main(["eval", "--bogus-flag"])
    assert rc != 0


def test_unknown_subcommand(capsys):
    rc = main(["frobnicate"])
    assert rc != 0


def test_eval_oracle_writes_report(tmp_path, capsys):
    out = str(tmp_path / "report.json")
    rc = main(["eval", "--agent", "oracle", "--preset", "grass",
               "--trials", "4", "--out", out])
    assert rc == 0
    report = json.load(open(out))
    assert report["score"] == "4/4"
    assert report["preset"] == "grass"


def test_fallbank_command(tmp_path, capsys):
    out = str(tmp_path / "bank.bin")
    rc = main(["fallbank", "--count", "30", "--out", out])
    assert rc == 0
    from dribblesim.sim.fallbank import load_fall_bank

    bank = load_fall_bank(out)
    assert bank["q"].shape[0] == 30


def test_train_smoke_via_cli(tmp_path, capsys):
    out = str(tmp_path / "run")
    rc = main(["train", "--out", out, "--envs", "4", "--steps", str(4 * 21 * 2)])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "metrics.jsonl"))
    assert os.path.exists(os.path.join(out, "ckpt_final.bin"))
    assert os.path.exists(os.path.join(out, "dribble_policy.bin"))


def test_eval_with_trained_policy(tmp_path, capsys):
    run_dir = str(tmp_path / "run")
    assert main(["train", "--out", run_dir, "--envs", "4",
                 "--steps", str(4 * 21)]) == 0
    policy = os.path.join(run_dir, "dribble_policy.bin")
    out = str(tmp_path / "rep.json")
    cfg_path = str(tmp_path / "eval_cfg.json")
    json.dump({"eval": {"trial_timeout": 3.0, "forward_time": 1.0,
                        "stop_time": 0.5}}, open(cfg_path, "w"))
    rc = main(["eval", "--policy", policy, "--preset", "tile", "--trials", "2",
               "--out", out, "--config", cfg_path])
    assert rc == 0
    assert json.load(open(out))["preset"] == "tile"


def test_plot_emits_csv(tmp_path, capsys):
    log = tmp_path / "trial.jsonl"
    with open(log, "w") as f:
        for i in range(10):
            f.write(json.dumps({
                "t": i * 0.02, "cmd": [1.0, 0.0],
                "ball_vel_global": [0.5, 0.0],
                "robot_ball_distance": 0.5, "mode": "dribble",
            }) + "\n")
    out_dir = str(tmp_path / "plots")
    rc = main(["plot", "--trial-log", str(log), "--out-dir", out_dir])
    assert rc == 0
    assert os.path.exists(os.path.join(out_dir, "tracking.csv"))


def test_plot_without_inputs_fails(tmp_path):
    rc = main(["plot", "--out-dir", str(tmp_path)])
    assert rc == 2


def test_config_errors_list_field_paths():
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"ppo": {"clip": 1.5}, "gait": {"duty": 2.0}})
    msg = str(ei.value)
    assert "ppo.clip" in msg
    assert "gait.duty" in msg


def test_config_unknown_field_reported():
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"sim": {"no_such_knob": 1}})
    assert "sim.no_such_knob" in str(ei.value)


def test_config_type_errors_reported():
    with pytest.raises(ConfigError) as ei:
        config_from_dict({"ppo": {"lr": "fast"}})
    assert "ppo.lr" in str(ei.value)


def test_config_roundtrip(tmp_path):
    cfg = Config()
    cfg.ppo.n_envs = 128
    from dribblesim.config import save_config

    path = str(tmp_path / "cfg.json")
    save_config(cfg, path)
    cfg2 = load_config(path)
    assert cfg2.ppo.n_envs == 128
    assert cfg2.config_hash() == cfg.config_hash()


def test_cli_config_validation_error_exit_code(tmp_path, capsys):
    bad = str(tmp_path / "bad.json")
    json.dump({"ppo": {"clip": 2.0}}, open(bad, "w"))
    rc = main(["train", "--config", bad, "--out", str(tmp_path / "x")])
    assert rc == 2
    assert "ppo.clip" in capsys.readouterr().err
