"""Held-out evaluation: metric tables, tag frequencies, chain lengths, reward averages."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import SynthEnv, TaskInstance, label_symbol
from .gspo import chain_length
from .policy import PolicyParams, PromptEncoder, sample_sequence
from .prmu import PrmuModel, scorer_for
from .rewards import TASK_KINDS, RewardContext, score_response, split_reasoning
from .tags import parse_chain, tag_histogram
from .text_metrics import classification_metrics, rouge1, rougeL

Responder = Callable[[TaskInstance, int], str]

REWARD_FIELDS = ("r_v", "r_f", "r_rep", "r_tag", "r_prmu", "composite", "foundation")
LENGTH_BIN = 5


class EvalError(ValueError):
    pass


@dataclass
class ReportBundle:
    label: str
    n: int
    metrics: dict[str, dict[str, float | None]]
    tag_frequencies: dict[str, float]
    chain_length: dict
    reward_means: dict[str, float]
    tag_compliance: float
    format_rate: float
    examples: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list[tuple[str, str, str, float | None]]:
        rows = []
        for kind, table in self.metrics.items():
            rows += [(self.label, f"metrics.{kind}", k, v) for k, v in table.items()]
        rows += [(self.label, "tag_frequency", k, v) for k, v in self.tag_frequencies.items()]
        rows += [(self.label, "chain_length", k, self.chain_length[k]) for k in ("mean", "median")]
        rows += [(self.label, "reward_mean", k, v) for k, v in self.reward_means.items()]
        rows += [(self.label, "structure", "tag_compliance", self.tag_compliance),
                 (self.label, "structure", "format_rate", self.format_rate)]
        return rows


def _label_index(text: str) -> int | None:
    t = text.strip().lower()
    if t.startswith("label_") and t[6:].isdigit():
        return int(t[6:])
    return None


def _classification_table(answers: Sequence[str], golds: Sequence[str]) -> dict:
    pi = [_label_index(a) for a in answers]
    gi = [_label_index(g) for g in golds]
    if None in gi:
        raise EvalError("classification golds must be label symbols")
    # an unreadable prediction still counts as wrong; it just makes mae/rmse undefined
    preds = pi if None not in pi else [a.strip().lower() for a in answers]
    return classification_metrics(preds, gi if None not in pi else [g.lower() for g in golds])


def length_histogram(lengths: Sequence[int], width: int = LENGTH_BIN) -> dict:
    if not lengths:
        return {"edges": [], "counts": []}
    top = (max(lengths) // width + 1) * width
    counts, edges = np.histogram(lengths, bins=np.arange(0, top + width, width))
    return {"edges": [int(e) for e in edges], "counts": [int(c) for c in counts]}


def evaluate_responses(tasks: Sequence[TaskInstance], raws: Sequence[str], ctx: RewardContext,
                       label: str = "eval", prmu: PrmuModel | None = None, n_examples: int = 3) -> ReportBundle:
    if len(tasks) != len(raws):
        raise EvalError("one response per task required")
    if not tasks:
        raise EvalError("empty evaluation set")
    by_kind: dict[str, list[int]] = {}
    for i, t in enumerate(tasks):
        if t.kind not in TASK_KINDS:
            raise EvalError(f"no metrics defined for task kind {t.kind!r}")
        by_kind.setdefault(t.kind, []).append(i)

    answers, chains, lengths, bds = [], [], [], []
    for t, raw in zip(tasks, raws):
        reasoning, answer = split_reasoning(raw, ctx.think_open, ctx.think_close)
        answers.append(answer)
        chains.append(parse_chain(raw if reasoning is None else reasoning))
        lengths.append(chain_length(raw))
        scorer = scorer_for(prmu, t.user_id, t.query, t.profile_pairs()) if prmu is not None else None
        bds.append(score_response(ctx, raw, t.kind, t.gold, scorer))

    metrics: dict[str, dict] = {}
    for kind, idx in by_kind.items():
        golds = [tasks[i].gold for i in idx]
        preds = [answers[i] for i in idx]
        if kind == "classification":
            table = _classification_table(preds, golds)
        else:
            table = {}
        table["rouge1"] = float(np.mean([rouge1(p, g) for p, g in zip(preds, golds)]))
        table["rougeL"] = float(np.mean([rougeL(p, g) for p, g in zip(preds, golds)]))
        metrics[kind] = table

    return ReportBundle(
        label=label, n=len(tasks), metrics=metrics,
        tag_frequencies=tag_histogram(chains),
        chain_length={"mean": float(np.mean(lengths)), "median": float(np.median(lengths)),
                      "histogram": length_histogram(lengths)},
        reward_means={f: float(np.mean([getattr(b, f) for b in bds])) for f in REWARD_FIELDS},
        tag_compliance=float(np.mean([b.r_tag == 0.0 for b in bds])),
        format_rate=float(np.mean([b.r_f for b in bds])),
        examples=[{"task_id": t.task_id, "gold": t.gold, "response": r}
                  for t, r in list(zip(tasks, raws))[:n_examples]],
    )


def evaluate(tasks: Sequence[TaskInstance], responder: Responder, ctx: RewardContext,
             label: str = "eval", prmu: PrmuModel | None = None) -> ReportBundle:
    return evaluate_responses(tasks, [responder(t, i) for i, t in enumerate(tasks)], ctx, label, prmu)


# -- responders ---------------------------------------------------------------

def policy_responder(params: PolicyParams, encoder: PromptEncoder, temperature: float = 0.0,
                     seed: int = 0, max_len: int = 32) -> Responder:
    """Greedy decoding at ``temperature <= 0``; otherwise one seeded sample per task."""
    def _respond(task: TaskInstance, i: int) -> str:
        rng = None if temperature <= 0 else np.random.default_rng([seed, 7, i])
        return sample_sequence(params, encoder(task), rng, temperature, 1.0, max_len).rendered_text
    return _respond


def _wrap(chain: str, answer: str, ctx: RewardContext) -> str:
    return f"{ctx.think_open} {chain} {ctx.think_close} {answer}"


def oracle_responder(env: SynthEnv, ctx: RewardContext) -> Responder:
    def _respond(task: TaskInstance, i: int) -> str:
        return _wrap(*env.oracle_responder(task, registry=ctx.registry), ctx)
    return _respond


def uniform_responder(env: SynthEnv, ctx: RewardContext, seed: int = 0) -> Responder:
    """Well-formed chain with a uniformly random class (or random content tokens)."""
    cfg = env.config

    def _respond(task: TaskInstance, i: int) -> str:
        rng = np.random.default_rng([seed, 8, i])
        chain, answer = env.oracle_responder(task, registry=ctx.registry)
        if task.kind == "classification":
            answer = label_symbol(int(rng.integers(cfg.n_classes)))
        else:
            answer = " ".join(f"w{int(j)}" for j in rng.integers(cfg.n_content, size=len(answer.split())))
        return _wrap(chain, answer, ctx)
    return _respond


# -- serialization ------------------------------------------------------------

CSV_HEADER = ("label", "section", "key", "value")


def bundles_to_csv(bundles: Sequence[ReportBundle]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for b in bundles:
        w.writerows(b.csv_rows())
    return buf.getvalue()


def write_eval(path_stem: str | Path, bundles: Sequence[ReportBundle], meta: dict) -> tuple[Path, Path]:
    stem = Path(path_stem)
    js, cs = stem.with_suffix(".json"), stem.with_suffix(".csv")
    js.write_text(json.dumps({"meta": meta, "bundles": [b.to_dict() for b in bundles]}, indent=2, sort_keys=True))
    cs.write_text(bundles_to_csv(bundles))
    return js, cs


def summary_row(name: str, bundles: dict[str, dict]) -> dict:
    """Headline numbers of one evaluation file: greedy accuracy, sampled structure."""
    greedy = bundles.get("greedy") or next(iter(bundles.values()))
    sampled = bundles.get("sampled") or greedy
    cls = greedy["metrics"].get("classification", {})
    gen = greedy["metrics"].get("generation", {})
    return {
        "checkpoint": name,
        "accuracy": cls.get("accuracy"), "macro_f1": cls.get("macro_f1"),
        "mae": cls.get("mae"), "rmse": cls.get("rmse"),
        "gen_rouge1": gen.get("rouge1"), "gen_rougeL": gen.get("rougeL"),
        "tag_compliance": sampled["tag_compliance"],
        "mean_chain_len": sampled["chain_length"]["mean"],
        "median_chain_len": sampled["chain_length"]["median"],
    }
