import json
import os
import subprocess
import sys

import numpy as np
import pytest

from diskill.cli import main
from diskill.trainer import ModelConfig, RunConfig, TrainConfig, UpdateConfig, read_log, save_config


@pytest.fixture
def config_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = TrainConfig(
        env="reacher", env_params={"n_links": 2, "link_length": 0.5, "horizon": 40},
        model=ModelConfig(n_experts=2, expert_hidden=(8,), energy_hidden=(8,), critic_hidden=(8,),
                          context_critic_hidden=(8,)),
        update=UpdateConfig(samples_per_expert=4, expert_epochs=2, critic_epochs=2, ebm_epochs=2),
        run=RunConfig(max_iterations=2, env_batch_size=32, eval_every=1, eval_contexts=8,
                      checkpoint="ck.txt", log="log.csv"),
    )
    save_config(cfg, "cfg.ini")
    return tmp_path / "cfg.ini"


def test_train_resume_infer(config_file, capsys):
    assert main(["train", "--config", str(config_file), "--seed", "3", "--iterations", "2"]) == 0
    assert len(read_log("log.csv")) == 2
    assert main(["resume", "--checkpoint", "ck.txt", "--iterations", "3"]) == 0
    assert len(read_log("log.csv")) == 3
    capsys.readouterr()
    assert main(["infer", "--checkpoint", "ck.txt", "--n-contexts", "5", "--deterministic"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "c1,c2,expert,return,success,theta"
    assert len(out) == 6
    np.savetxt("goals.csv", [[0.5, 0.1], [0.2, -0.3]], delimiter=",")
    assert main(["infer", "--checkpoint", "ck.txt", "--contexts", "goals.csv", "--out", "inf.csv"]) == 0
    assert len(open("inf.csv").read().strip().splitlines()) == 3


def test_reports(config_file, capsys, tmp_path):
    for seed in (0, 1):
        main(["train", "--config", str(config_file), "--seed", str(seed), "--log", f"log{seed}.csv",
              "--checkpoint", f"ck{seed}.txt"])
    capsys.readouterr()
    assert main(["report", "iqm", "--logs", "log*.csv", "--metric", "mean_return", "--n-boot", "50"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "iteration,iqm,ci_low,ci_high" and len(lines) == 3
    assert main(["report", "iqm", "--logs", "log*.csv", "--metric", "eval_return", "--out", "iqm.csv"]) == 0
    assert os.path.exists("iqm.csv")
    capsys.readouterr()
    assert main(["report", "activity", "--checkpoint", "ck0.txt", "--grid", "30", "--out", "act.csv"]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["contexts"] == 30 and 0 <= summary["fraction_2plus"] <= 1
    assert main(["report", "heatmap", "--checkpoint", "ck0.txt", "--grid", "30", "--out-dir", "hm"]) == 0
    assert os.path.exists("hm/heatmap.svg")
    capsys.readouterr()
    assert main(["report", "diversity", "--checkpoint", "ck0.txt", "--grid", "4", "--samples", "3",
                 "--out-dir", "div"]) == 0
    assert json.loads(capsys.readouterr().out)["contexts"] == 4
    assert os.path.exists("div/diversity.csv")


def test_errors(config_file, capsys):
    assert main(["resume", "--checkpoint", "nope.txt"]) == 2
    open("bad.ini", "w").write("[model]\nunknown = 1\n")
    assert main(["train", "--config", "bad.ini"]) == 2
    assert "unknown" in capsys.readouterr().err


def test_console_script(config_file):
    out = subprocess.run([sys.executable, "-m", "diskill.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "train" in out.stdout
