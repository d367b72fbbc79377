import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from pgrl.cli import main
from pgrl.training import METRICS_COLUMNS, METRICS_TAG, Trainer, dumps_checkpoint, load_checkpoint, read_metrics
from pgrl.oracle import TabularMDP


def write_config(tmp_path, name="run", **overrides):
    data = {
        "env": {"name": "chain", "params": {"mdp": "five_state", "max_episode_steps": 20}},
        "algo": {"name": "ppo", "horizon": 64, "epochs": 3, "lr": 0.01},
        "network": {"hidden": [8]},
        "seed": 3,
        "total_steps": 640,
        "metrics_path": str(tmp_path / f"{name}.csv"),
        "checkpoint_path": str(tmp_path / f"{name}.ckpt.json"),
        "checkpoint_interval": 4,
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(data))
    return path, data


def test_budget_zero_writes_header_and_checkpoint(tmp_path):
    path, data = write_config(tmp_path, total_steps=0)
    assert main(["train", "--config", str(path)]) == 0
    assert Path(data["metrics_path"]).read_text() == METRICS_TAG + "\n" + ",".join(METRICS_COLUMNS) + "\n"
    state = load_checkpoint(data["checkpoint_path"])
    assert state["global_step"] == 0 and state["update"] == 0


@pytest.mark.parametrize("algo", ["reinforce", "a2c", "ppo"])
def test_identical_runs_give_identical_metrics(tmp_path, algo):
    a, da = write_config(tmp_path, "a", algo={"name": algo})
    b, db = write_config(tmp_path, "b", algo={"name": algo})
    assert main(["train", "--config", str(a)]) == 0
    assert main(["train", "--config", str(b)]) == 0
    text = Path(da["metrics_path"]).read_bytes()
    assert text == Path(db["metrics_path"]).read_bytes()
    rows = read_metrics(da["metrics_path"])
    assert len(rows) >= 8 and rows[-1]["step"] >= 640


def test_resume_reproduces_uninterrupted_run(tmp_path):
    full, dfull = write_config(tmp_path, "full")
    assert main(["train", "--config", str(full)]) == 0
    # stop halfway, then resume from the periodic checkpoint with the full budget
    half, dhalf = write_config(tmp_path, "half", total_steps=256)
    assert main(["train", "--config", str(half)]) == 0
    state = load_checkpoint(dhalf["checkpoint_path"])
    state["config"]["total_steps"] = 640
    Path(dhalf["checkpoint_path"]).write_text(dumps_checkpoint(state))
    resumed, _ = write_config(tmp_path, "half", total_steps=640)
    assert main(["train", "--config", str(resumed), "--resume", dhalf["checkpoint_path"]]) == 0
    assert Path(dhalf["metrics_path"]).read_bytes() == Path(dfull["metrics_path"]).read_bytes()
    assert Path(dhalf["checkpoint_path"]).read_bytes() == Path(dfull["checkpoint_path"]).read_bytes().replace(
        b"full.", b"half.")


def test_resume_rejects_other_config(tmp_path):
    a, da = write_config(tmp_path, "a")
    assert main(["train", "--config", str(a)]) == 0
    b, _ = write_config(tmp_path, "b", seed=9)
    assert main(["train", "--config", str(b), "--resume", da["checkpoint_path"]]) == 1


def test_checkpoint_save_load_save_is_byte_identical(tmp_path):
    path, data = write_config(tmp_path)
    assert main(["train", "--config", str(path)]) == 0
    first = Path(data["checkpoint_path"]).read_text()
    again = Trainer.from_state(load_checkpoint(data["checkpoint_path"]))
    assert dumps_checkpoint(again.state_dict()) == first


def test_invalid_config_exits_2_with_field_message(tmp_path, capsys):
    path, _ = write_config(tmp_path, algo={"clip_eps": -0.1})
    assert main(["train", "--config", str(path)]) == 2
    assert "algo.clip_eps" in capsys.readouterr().err


def test_non_finite_loss_saves_last_good_state(tmp_path, capsys):
    path, data = write_config(tmp_path, algo={"lr": 1e300, "normalize_advantages": False})
    assert main(["train", "--config", str(path)]) == 1
    assert "last good state" in capsys.readouterr().err
    state = load_checkpoint(data["checkpoint_path"])
    assert all(math.isfinite(v) for v in state["policy"]["params"])


def test_eval_zero_episodes(tmp_path):
    path, data = write_config(tmp_path, total_steps=0)
    assert main(["train", "--config", str(path)]) == 0
    out = tmp_path / "e.json"
    assert main(["eval", "--ckpt", data["checkpoint_path"], "--episodes", "0", "--out", str(out)]) == 0
    summary = json.loads(out.read_text())
    assert summary["episodes"] == 0 and summary["mean_return"] is None


def test_deterministic_eval_on_deterministic_env_has_zero_variance(tmp_path):
    base = TabularMDP.chain(4, slip=0.0)
    mdp = TabularMDP(base.P, base.R, base.gamma, np.array([1.0, 0.0, 0.0, 0.0]))
    mdp.save(tmp_path / "det.json")
    path, data = write_config(tmp_path, total_steps=0,
                              env={"params": {"mdp": str(tmp_path / "det.json"), "max_episode_steps": 10}})
    assert main(["train", "--config", str(path)]) == 0
    assert main(["eval", "--ckpt", data["checkpoint_path"], "--episodes", "5", "--deterministic"]) == 0
    summary = json.loads((tmp_path / "run.ckpt.eval.json").read_text())
    assert summary["episodes"] == 5 and summary["std_return"] == 0.0


def test_eval_rejects_mismatched_environment(tmp_path):
    path, data = write_config(tmp_path, total_steps=0)
    assert main(["train", "--config", str(path)]) == 0
    state = load_checkpoint(data["checkpoint_path"])
    state["config"]["env"] = {"name": "point_mass", "params": {}}
    Path(data["checkpoint_path"]).write_text(dumps_checkpoint(state))
    assert main(["eval", "--ckpt", data["checkpoint_path"], "--episodes", "1"]) == 1


def test_unknown_suite_exits_2(capsys):
    assert main(["verify", "--suite", "nonsense"]) == 2
    assert "usage" in capsys.readouterr().err


def test_verify_identities_passes(capsys):
    assert main(["verify", "--suite", "identities"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_plot_header_only_csv(tmp_path):
    csv = tmp_path / "m.csv"
    csv.write_text(METRICS_TAG + "\n" + ",".join(METRICS_COLUMNS) + "\n")
    img = tmp_path / "m.png"
    assert main(["plot", "--in", str(csv), "--out", str(img)]) == 0
    assert img.stat().st_size > 0


def test_plot_training_csv(tmp_path):
    path, data = write_config(tmp_path)
    assert main(["train", "--config", str(path)]) == 0
    img = tmp_path / "curve.png"
    assert main(["plot", "--in", data["metrics_path"], "--out", str(img), "--window", "3"]) == 0
    assert img.stat().st_size > 0


def test_plot_malformed_csv_names_line(tmp_path, capsys):
    csv = tmp_path / "m.csv"
    csv.write_text(METRICS_TAG + "\n" + ",".join(METRICS_COLUMNS) + "\n" + "1,2,3\n")
    img = tmp_path / "m.png"
    assert main(["plot", "--in", str(csv), "--out", str(img)]) == 1
    assert "line 3" in capsys.readouterr().err
    assert not img.exists()


def test_missing_command_and_bad_flags():
    assert main([]) == 2
    assert main(["eval", "--ckpt", "x"]) == 2
    assert main(["train", "--config", "/nonexistent.yaml"]) == 1
