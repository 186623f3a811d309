"""Build a small tagged-chain dataset with the offline mock clients."""

import sys
import tempfile
from pathlib import Path

from tagpr.clients import MockGenerator, MockJudge, MockTagger
from tagpr.env import EnvConfig, SynthEnv
from tagpr.pipeline import PipelineConfig, answer_key, pipeline_instances, run_pipeline

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="tagpr-pipeline-"))
env = SynthEnv(EnvConfig())
cfg = PipelineConfig(instances_per_task=40, rollouts_per_instance=8)
instances = pipeline_instances(env, cfg)
manifest = run_pipeline(instances, cfg, MockGenerator(answer_key(env, instances)), MockJudge(), MockTagger(), out)
for stage, n in manifest["counts"].items():
    print(f"{stage:14s} {n}")
print("derived registry:", ", ".join(manifest["registry"]["names"]))
print(f"\nfirst records of {out / 'dataset.jsonl'}:\n")
print((out / "sample_report.md").read_text()[:1200])
