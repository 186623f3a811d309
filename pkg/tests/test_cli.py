import json

import pytest

from tagpr.cli import main
from tagpr.config import desk_config, dump_config
from tagpr.rewards import THINK_CLOSE, THINK_OPEN

TINY = {
    "prmu": {"n_prp": 60, "n_pqp": 60, "epochs": 2},
    "sft": {"n_examples": 40, "epochs": 1},
    "gspo": {"batch_size": 8, "G": 2, "max_len": 16},
    "schedule": {"guided_epochs": 1, "exploratory_epochs": 1, "rl_prompts": 8},
    "eval": {"n_tasks": 40},
    "pipeline": {"instances_per_task": 5, "rollouts_per_instance": 4},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.yaml"
    dump_config(desk_config(run_dir=str(tmp_path / "run"), **TINY), path)
    return path, tmp_path / "run"


def _record(**kw):
    rec = {"task_kind": "classification", "gold": "label_1", "answer": "label_1",
           "chain": "<analyze_input> a </analyze_input> <examine_examples> b </examine_examples> "
                    "<make_decision> c </make_decision>"}
    rec.update(kw)
    return json.dumps(rec)


def test_score_empty(tmp_path):
    (tmp_path / "in.jsonl").write_text("")
    assert main(["score", "--input", str(tmp_path / "in.jsonl"), "--output", str(tmp_path / "out.jsonl")]) == 0
    assert (tmp_path / "out.jsonl").read_text() == ""


def test_score_perfect_record(tmp_path):
    (tmp_path / "in.jsonl").write_text(_record() + "\n")
    assert main(["score", "--input", str(tmp_path / "in.jsonl"), "--output", str(tmp_path / "out.jsonl")]) == 0
    r = json.loads((tmp_path / "out.jsonl").read_text())["rewards"]
    assert r["r_v"] == 1.0 and r["r_tag"] == 0.0 and r["r_rep"] == 0.0 and r["r_f"] == 1.0
    assert r["composite"] == pytest.approx(0.8 * 1 + 0.8 * 0 + 0.2 * r["r_prmu"], abs=1e-12)


def test_score_malformed_line(tmp_path, capsys):
    (tmp_path / "in.jsonl").write_text(_record() + "\n{not json\n")
    code = main(["score", "--input", str(tmp_path / "in.jsonl"), "--output", str(tmp_path / "out.jsonl")])
    assert code == 2 and ":2:" in capsys.readouterr().err
    assert not (tmp_path / "out.jsonl").exists()
    (tmp_path / "in.jsonl").write_text(_record(task_kind="ranking") + "\n")
    assert main(["score", "--input", str(tmp_path / "in.jsonl"), "--output", str(tmp_path / "o")]) == 2


def test_bad_config(tmp_path):
    (tmp_path / "c.yaml").write_text("gspo:\n  clip: 0.2\n")
    assert main(["report", "--config", str(tmp_path / "c.yaml")]) == 2
    assert main(["train", "--stage", "nope"]) == 2


def test_stage_order_enforced(tiny, capsys):
    cfg, run = tiny
    assert main(["train", "--stage", "rl-guided", "--config", str(cfg)]) == 3
    assert "sft checkpoint" in capsys.readouterr().err
    assert main(["train", "--stage", "rl-explore", "--config", str(cfg)]) == 3
    assert "rl-guided checkpoint" in capsys.readouterr().err
    assert main(["report", "--config", str(cfg)]) == 3
    assert main(["eval", "--checkpoint", "sft", "--config", str(cfg)]) == 3


def test_lock_file(tiny, capsys):
    cfg, run = tiny
    run.mkdir(parents=True)
    (run / "run.lock").write_text("1")
    assert main(["eval", "--checkpoint", "oracle", "--config", str(cfg)]) == 2
    assert "in use" in capsys.readouterr().err


def test_full_stage_sequence(tiny):
    cfg, run = tiny
    for stage in ("prmu", "sft", "rl-guided", "rl-explore"):
        assert main(["train", "--stage", stage, "--config", str(cfg)]) == 0
        assert (run / "checkpoints" / f"{stage}.json").exists()
    first = (run / "metrics" / "rl-guided.csv").read_text()
    assert first.splitlines()[0] == "stage,epoch,batch,mean_reward,tag_compliance,mean_len,objective"
    assert main(["train", "--stage", "rl-guided", "--config", str(cfg)]) == 0
    assert (run / "metrics" / "rl-guided.csv").read_text() == first
    for name in ("oracle", "uniform", "sft", "rl-explore"):
        assert main(["eval", "--checkpoint", name, "--config", str(cfg)]) == 0
    oracle = json.loads((run / "eval" / "oracle.json").read_text())["bundles"][0]
    assert oracle["metrics"]["classification"]["accuracy"] == 1.0
    sft = json.loads((run / "eval" / "sft.json").read_text())
    assert [b["label"] for b in sft["bundles"]] == ["greedy", "sampled"]
    for b in sft["bundles"]:
        if b["tag_frequencies"]:
            assert abs(sum(b["tag_frequencies"].values()) - 1.0) < 1e-12
    assert main(["report", "--config", str(cfg)]) == 0
    report = (run / "report.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in report[1:]] == ["uniform", "sft", "rl-explore", "oracle"]
    assert (run / "config.yaml").exists() and not (run / "run.lock").exists()


def test_pipeline_command(tiny):
    cfg, run = tiny
    assert main(["pipeline", "--config", str(cfg)]) == 0
    manifest = json.loads((run / "pipeline" / "manifest.json").read_text())
    assert manifest["counts"]["final"] <= manifest["counts"]["generated"]
    assert manifest["config"]["pipeline"]["instances_per_task"] == 5


def test_pipeline_remote_failure(tiny, monkeypatch):
    cfg, run = tiny
    text = cfg.read_text().replace("clients: mock", "clients: http")
    cfg.write_text(text.replace("retry_backoff: 0.5", "retry_backoff: 0.0"))
    monkeypatch.setenv("TAGPR_ENDPOINT", "http://127.0.0.1:9/none")
    assert main(["pipeline", "--config", str(cfg)]) == 4
    manifest = json.loads((run / "pipeline" / "manifest.json").read_text())
    assert manifest["failures"]["instances"] == manifest["counts"]["instances"]


def test_markers_default():
    assert (THINK_OPEN, THINK_CLOSE) == ("<think>", "</think>")
