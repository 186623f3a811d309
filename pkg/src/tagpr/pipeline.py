"""Construction of a tagged reasoning-chain dataset.

Stages, in order: candidate generation, accuracy filter, judge filter,
exploratory (free-form) tagging, tag clustering into a registry, restricted
tagging with that registry, and a structural format filter before the JSONL
dataset is written. Every stage only removes records, never adds them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .clients import ClientError, GenerationClient, complete_with_retry, with_payload
from .env import SynthEnv, TaskInstance
from .kmeans import kmeans
from .rewards import split_reasoning, verifiable_reward
from .tags import TagRegistry, parse_chain, validate

log = logging.getLogger(__name__)

JUDGE_FIELDS = ("logical_consistency", "factual_accuracy", "completeness", "conciseness")


@dataclass(frozen=True)
class PipelineConfig:
    instances_per_task: int = 1000
    rollouts_per_instance: int = 16
    rouge_threshold: float = 0.3
    judge_threshold: int = 15
    k_clusters: int = 9
    min_tag_count: int = 3
    parallelism: int = 4
    retry_attempts: int = 3
    retry_backoff: float = 0.5
    sample_report_size: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.instances_per_task, self.rollouts_per_instance, self.k_clusters,
               self.min_tag_count, self.parallelism, self.retry_attempts) < 1:
            raise ValueError("pipeline counts must be positive")
        if not 0.0 <= self.rouge_threshold <= 1.0:
            raise ValueError("rouge_threshold must lie in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class JudgeScore:
    logical_consistency: int
    factual_accuracy: int
    completeness: int
    conciseness: int

    def __post_init__(self):
        for name in JUDGE_FIELDS:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v <= 5:
                raise ValueError(f"{name} must be an integer in 0..5, got {v!r}")

    @property
    def composite(self) -> int:
        return sum(getattr(self, name) for name in JUDGE_FIELDS)


@dataclass
class PipelineRecord:
    task_id: str
    task_kind: str
    user_id: str
    query: str
    profile: list[tuple[str, str]]
    gold: str
    candidate: str
    rollout: int = 0
    accuracy_pass: bool | None = None
    judge_pass: bool | None = None
    format_pass: bool | None = None
    judge_composite: int | None = None
    exploratory_tags: list[str] = field(default_factory=list)
    step_tags: list[str | None] = field(default_factory=list)
    final_tags: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def reasoning(self) -> str:
        reasoning, _ = split_reasoning(self.candidate)
        return reasoning or ""

    @property
    def answer(self) -> str:
        return split_reasoning(self.candidate)[1]

    @property
    def steps(self) -> list[str]:
        return [s.strip() for s in self.reasoning.split("\n") if s.strip()]

    def tagged_chain(self) -> str:
        parts = []
        for step, tag in zip(self.steps, self.step_tags or [None] * len(self.steps)):
            parts.append(step if tag is None else f"<{tag}>{step}</{tag}>")
        return "\n".join(parts)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id, "task_kind": self.task_kind, "user_id": self.user_id,
            "query": self.query, "profile": [{"query": q, "response": r} for q, r in self.profile],
            "chain": self.tagged_chain(), "answer": self.answer, "gold": self.gold,
            "final_tags": list(self.final_tags),
            "provenance": {
                "stage_flags": {"accuracy_pass": self.accuracy_pass, "judge_pass": self.judge_pass,
                                "format_pass": self.format_pass},
                "judge_composite": self.judge_composite, "rollout": self.rollout,
            },
        }


# -- generation ------------------------------------------------------------------

def generation_prompt(task: TaskInstance) -> str:
    instructions = ("Reason step by step about this user's history, one step per line inside "
                    "<think></think>, then give only the final answer.")
    return with_payload(instructions, {"task_id": task.task_id, "kind": task.kind, "query": task.query,
                                       "profile": task.profile_pairs()})


def _generate_one(task: TaskInstance, client: GenerationClient, cfg: PipelineConfig):
    try:
        texts = complete_with_retry(client, generation_prompt(task), cfg.rollouts_per_instance, 1.0,
                                    attempts=cfg.retry_attempts, backoff=cfg.retry_backoff)
    except ClientError as exc:
        log.error("skipping instance %s: %s", task.task_id, exc)
        return None
    return [PipelineRecord(task.task_id, task.kind, task.user_id, task.query, task.profile_pairs(),
                           task.gold, text, rollout=i) for i, text in enumerate(texts)]


def generate_candidates(instances: Sequence[TaskInstance], client: GenerationClient,
                        cfg: PipelineConfig) -> tuple[list[PipelineRecord], list[str]]:
    """``rollouts_per_instance`` records per instance; failed instance ids are returned too."""
    with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
        results = list(pool.map(lambda t: _generate_one(t, client, cfg), instances))
    records, failed = [], []
    for task, res in zip(instances, results):
        if res is None:
            failed.append(task.task_id)
        else:
            records.extend(res)
    return records, failed


# -- filters ---------------------------------------------------------------------

def accuracy_filter(records: Sequence[PipelineRecord], cfg: PipelineConfig) -> list[PipelineRecord]:
    out = []
    for r in records:
        score = verifiable_reward(r.task_kind, r.answer, r.gold)
        r.accuracy_pass = score >= 1.0 if r.task_kind == "classification" else score >= cfg.rouge_threshold
        if r.accuracy_pass:
            out.append(r)
    return out


def judge_prompt(record: PipelineRecord) -> str:
    instructions = ("Rate the reasoning chain from 0 to 5 on logical_consistency, factual_accuracy, "
                    "completeness and conciseness. Reply with a JSON object holding those four integers.")
    return with_payload(instructions, {"query": record.query, "chain": record.reasoning,
                                       "answer": record.answer})


def parse_judge_output(text: str) -> JudgeScore:
    match = re.search(r"\{.*\}", text, re.S)
    if not match:
        raise ValueError("no JSON object in judge output")
    data = json.loads(match.group(0))
    missing = [k for k in JUDGE_FIELDS if k not in data]
    if missing:
        raise ValueError(f"judge output lacks {missing}")
    return JudgeScore(**{k: data[k] for k in JUDGE_FIELDS})


def judge_filter(records: Sequence[PipelineRecord], judge: GenerationClient, threshold: int = 15,
                 parallelism: int = 4, attempts: int = 3) -> list[PipelineRecord]:
    """Keep records whose composite judge score is strictly above ``threshold``."""
    def _ask(r):
        try:
            return complete_with_retry(judge, judge_prompt(r), 1, 0.0, attempts=attempts)[0]
        except ClientError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        replies = list(pool.map(_ask, records))
    out = []
    for r, reply in zip(records, replies):
        if isinstance(reply, Exception):
            log.error("judge unavailable for %s: %s", r.task_id, reply)
            r.judge_pass = False
            continue
        try:
            score = parse_judge_output(reply)
        except (ValueError, TypeError, json.JSONDecodeError) as exc:
            log.warning("dropping %s/%d: unparseable judge output (%s)", r.task_id, r.rollout, exc)
            r.judge_pass = False
            r.notes.append("judge_parse_failure")
            continue
        r.judge_composite = score.composite
        r.judge_pass = score.composite > threshold
        if r.judge_pass:
            out.append(r)
    return out


# -- tagging -----------------------------------------------------------------------

def normalize_tag(tag: str) -> str:
    return re.sub(r"\s+", "_", tag.strip().lower())


def tagger_prompt(record: PipelineRecord, registry: Sequence[str] | None = None) -> str:
    if registry is None:
        instructions = "Give one short descriptive tag for each reasoning step. Reply with a JSON list."
        payload = {"steps": record.steps}
    else:
        instructions = ("Label each reasoning step with exactly one tag from the allowed list. "
                        "Reply with a JSON list.")
        payload = {"steps": record.steps, "registry": list(registry)}
    return with_payload(instructions, payload)


def _parse_tag_list(text: str) -> list[str]:
    try:
        tags = json.loads(text)
    except json.JSONDecodeError:
        tags = [t for t in re.split(r"[,\n]", text)]
    if not isinstance(tags, list):
        return []
    return [str(t) for t in tags if str(t).strip()]


def exploratory_tagging(records: Sequence[PipelineRecord], tagger: GenerationClient,
                        parallelism: int = 4) -> list[PipelineRecord]:
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        replies = list(pool.map(lambda r: tagger.complete(tagger_prompt(r), 1, 0.0), records))
    for r, reply in zip(records, replies):
        tags = []
        for t in _parse_tag_list(reply[0] if reply else ""):
            norm = normalize_tag(t)
            if norm not in tags:
                tags.append(norm)
        r.exploratory_tags = tags
        if not tags:
            r.notes.append("empty_exploratory_tags")
    return list(records)


def embed_tags(tags: Sequence[str], dim: int = 256) -> np.ndarray:
    """Hashed character-trigram vectors, L2-normalized; the empty string maps to zero."""
    out = np.zeros((len(tags), dim))
    for row, tag in enumerate(tags):
        if not tag:
            continue
        padded = f"#{tag}#"
        for i in range(len(padded) - 2):
            h = hashlib.blake2b(padded[i:i + 3].encode(), digest_size=8).digest()
            out[row, int.from_bytes(h, "little") % dim] += 1.0
        out[row] /= np.linalg.norm(out[row])
    return out


@dataclass
class TagClusters:
    tags: list[str]
    assignments: np.ndarray
    inertia_trace: list[float]


def cluster_tags(records: Sequence[PipelineRecord], k: int, seed: int = 0) -> TagClusters:
    tags = sorted({t for r in records for t in r.exploratory_tags})
    if not tags:
        raise ValueError("no exploratory tags to cluster")
    res = kmeans(embed_tags(tags), min(k, len(tags)), seed=seed)
    return TagClusters(tags, res.assignments, res.inertia_trace)


def derive_primary_tags(clusters: TagClusters, records: Sequence[PipelineRecord],
                        min_tag_count: int = 3) -> TagRegistry:
    """Most frequent member of every cluster (ties: lexicographically smallest)."""
    freq = Counter(t for r in records for t in r.exploratory_tags)
    names = []
    for c in sorted(set(int(a) for a in clusters.assignments)):
        members = [t for t, a in zip(clusters.tags, clusters.assignments) if a == c]
        names.append(min(members, key=lambda t: (-freq[t], t)))
    return TagRegistry(tuple(names), min_tag_count)


def restricted_tagging(records: Sequence[PipelineRecord], registry: TagRegistry, tagger: GenerationClient,
                       parallelism: int = 4) -> list[PipelineRecord]:
    """Tag steps with registry names only; anything else is dropped and the record flagged."""
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        replies = list(pool.map(lambda r: tagger.complete(tagger_prompt(r, registry.names), 1, 0.0), records))
    for r, reply in zip(records, replies):
        raw = [normalize_tag(t) for t in _parse_tag_list(reply[0] if reply else "")]
        steps = r.steps
        step_tags: list[str | None] = []
        for i in range(len(steps)):
            t = raw[i] if i < len(raw) else None
            if t is not None and t not in registry:
                r.notes.append(f"off_registry_tag:{t}")
                t = None
            step_tags.append(t)
        r.step_tags = step_tags
        r.final_tags = [t for t in step_tags if t is not None]
    return list(records)


# -- format filter and output ---------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".part")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def format_filter(records: Sequence[PipelineRecord], registry: TagRegistry) -> list[PipelineRecord]:
    out = []
    for r in records:
        r.format_pass = validate(parse_chain(r.tagged_chain()), registry).passes
        if r.format_pass:
            out.append(r)
    return out


def serialize(records: Sequence[PipelineRecord], path: str | Path) -> None:
    _atomic_write(Path(path), "".join(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) + "\n"
                                      for r in records))


def format_filter_and_serialize(records: Sequence[PipelineRecord], registry: TagRegistry,
                                path: str | Path) -> tuple[list[PipelineRecord], dict]:
    final = format_filter(records, registry)
    serialize(final, path)
    return final, {"tagged": len(records), "final": len(final)}


def sample_report(records: Sequence[PipelineRecord], n: int, seed: int) -> str:
    """A few random final records pretty-printed for manual review."""
    if not records:
        return "(no records)\n"
    rng = np.random.default_rng(seed)
    idx = sorted(rng.choice(len(records), size=min(n, len(records)), replace=False))
    blocks = []
    for i in idx:
        r = records[i]
        blocks.append(f"## {r.task_id} rollout {r.rollout} (user {r.user_id})\n"
                      f"query: {r.query}\n{r.tagged_chain()}\nanswer: {r.answer}   gold: {r.gold}\n")
    return "\n".join(blocks)


# -- end to end --------------------------------------------------------------------------

def pipeline_instances(env: SynthEnv, cfg: PipelineConfig) -> list[TaskInstance]:
    out = []
    for kind in env.config.task_kinds:
        out += env.tasks(cfg.instances_per_task, seed=cfg.seed, kind=kind, prefix=f"pipe-{kind[:3]}")
    return out


def answer_key(env: SynthEnv, instances: Sequence[TaskInstance]) -> dict[str, dict]:
    """Gold answers and plausible wrong answers per task, for the mock generator."""
    key = {}
    for t in instances:
        if t.kind == "classification":
            distractors = [f"label_{c}" for c in range(env.config.n_classes) if f"label_{c}" != t.gold]
        else:
            distractors = [env.majority_answer(t.item, t.kind)]
        key[t.task_id] = {"gold": t.gold, "distractors": distractors}
    return key


def run_pipeline(instances: Sequence[TaskInstance], cfg: PipelineConfig, generator: GenerationClient,
                 judge: GenerationClient, tagger: GenerationClient, out_dir: str | Path,
                 config_echo: dict | None = None) -> dict:
    """Run every stage, write ``dataset.jsonl``, ``manifest.json`` and ``sample_report.md``."""
    out_dir = Path(out_dir)
    counts = {"instances": len(instances)}
    records, failed = generate_candidates(instances, generator, cfg)
    counts["generated"] = len(records)
    records = accuracy_filter(records, cfg)
    counts["accuracy_pass"] = len(records)
    records = judge_filter(records, judge, cfg.judge_threshold, cfg.parallelism, cfg.retry_attempts)
    counts["judge_pass"] = len(records)
    records = exploratory_tagging(records, tagger, cfg.parallelism)
    counts["explored"] = len(records)
    registry = None
    final: list[PipelineRecord] = []
    inertia: list[float] = []
    if records and any(r.exploratory_tags for r in records):
        clusters = cluster_tags(records, cfg.k_clusters, cfg.seed)
        inertia = clusters.inertia_trace
        registry = derive_primary_tags(clusters, records, cfg.min_tag_count)
        records = restricted_tagging(records, registry, tagger, cfg.parallelism)
        counts["tagged"] = len(records)
        final, _ = format_filter_and_serialize(records, registry, out_dir / "dataset.jsonl")
    else:
        counts["tagged"] = 0
        serialize([], out_dir / "dataset.jsonl")
    counts["final"] = len(final)
    manifest = {
        "config": config_echo if config_echo is not None else asdict(cfg),
        "counts": counts,
        "failures": {"instances": len(failed), "task_ids": failed},
        "registry": registry.to_dict() if registry else None,
        "kmeans_inertia_trace": inertia,
    }
    _atomic_write(out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _atomic_write(out_dir / "sample_report.md", sample_report(final, cfg.sample_report_size, cfg.seed))
    return manifest
