import hashlib
import json

import pytest

from tagpr.clients import MockGenerator, MockJudge, MockTagger
from tagpr.env import EnvConfig, SynthEnv
from tagpr.pipeline import (JudgeScore, PipelineConfig, PipelineRecord, answer_key, derive_primary_tags,
                            cluster_tags, embed_tags, judge_filter, normalize_tag, parse_judge_output,
                            pipeline_instances, run_pipeline)
from tagpr.tags import TagRegistry, parse_chain, validate

STAGES = ("instances", "generated", "accuracy_pass", "judge_pass", "explored", "tagged", "final")


def _run(tmp_path, name, seed=0):
    env = SynthEnv(EnvConfig())
    cfg = PipelineConfig(instances_per_task=20, rollouts_per_instance=4, seed=seed)
    inst = pipeline_instances(env, cfg)
    out = tmp_path / name
    manifest = run_pipeline(inst, cfg, MockGenerator(answer_key(env, inst), seed), MockJudge(seed),
                            MockTagger(seed), out)
    return out, manifest


def test_deterministic_and_sound(tmp_path):
    a, man = _run(tmp_path, "a")
    b, _ = _run(tmp_path, "b")
    da, db = (a / "dataset.jsonl").read_bytes(), (b / "dataset.jsonl").read_bytes()
    assert hashlib.sha256(da).hexdigest() == hashlib.sha256(db).hexdigest()
    counts = [man["counts"][s] for s in STAGES]
    assert all(y <= x for x, y in zip(counts[1:], counts[2:]))
    assert counts[-1] > 0
    registry = TagRegistry.from_dict(man["registry"])
    for line in da.decode().splitlines():
        rec = json.loads(line)
        assert validate(parse_chain(rec["chain"]), registry).passes
        assert rec["provenance"]["judge_composite"] > 15
    assert (a / "manifest.json").exists() and (a / "sample_report.md").exists()


class _FixedJudge:
    def __init__(self, scores):
        self.scores = scores

    def complete(self, prompt, n=1, temperature=0.0):
        s = self.scores.pop(0)
        if s is None:
            return ["not json"]
        return [json.dumps({"logical_consistency": s[0], "factual_accuracy": s[1],
                            "completeness": s[2], "conciseness": s[3]})]


def _record(i):
    return PipelineRecord(f"t{i}", "classification", "u", "q", [], "label_0", "<think>a</think>label_0")


def test_judge_threshold_strict():
    recs = [_record(i) for i in range(4)]
    kept = judge_filter(recs, _FixedJudge([(4, 4, 4, 3), (4, 4, 4, 4), (5, 5, 5, 5), None]), 15, parallelism=1)
    assert [r.task_id for r in kept] == ["t1", "t2"]
    assert recs[0].judge_composite == 15 and recs[0].judge_pass is False
    assert "judge_parse_failure" in recs[3].notes


def test_judge_parsing():
    s = parse_judge_output('score: {"logical_consistency": 5, "factual_accuracy": 4, '
                           '"completeness": 3, "conciseness": 2}')
    assert s.composite == 14
    with pytest.raises(ValueError):
        parse_judge_output('{"logical_consistency": 5}')
    with pytest.raises(ValueError):
        JudgeScore(6, 0, 0, 0)


def test_tag_helpers():
    assert normalize_tag("  Analyze  Input ") == "analyze_input"
    v = embed_tags(["abc", ""])
    assert v[0] @ v[0] == pytest.approx(1.0) and not v[1].any()


def test_primary_tags_from_clusters():
    recs = [_record(i) for i in range(3)]
    recs[0].exploratory_tags = ["analyze_input", "analyse_input"]
    recs[1].exploratory_tags = ["analyze_input", "make_decision"]
    recs[2].exploratory_tags = ["make_decision", "make_decisions"]
    clusters = cluster_tags(recs, 2, seed=0)
    reg = derive_primary_tags(clusters, recs, min_tag_count=1)
    assert set(reg.names) == {"analyze_input", "make_decision"}


def test_failed_instances_recorded(tmp_path):
    env = SynthEnv(EnvConfig())
    cfg = PipelineConfig(instances_per_task=3, rollouts_per_instance=2, retry_attempts=1)

    class Broken:
        def complete(self, prompt, n=1, temperature=1.0):
            from tagpr.clients import ClientError
            raise ClientError("down")

    man = run_pipeline(pipeline_instances(env, cfg), cfg, Broken(), MockJudge(), MockTagger(), tmp_path)
    assert man["failures"]["instances"] == 3 and man["counts"]["final"] == 0
    assert (tmp_path / "dataset.jsonl").read_text() == ""
