"""Reward signals for tagged personalized responses and their combinations.

The guided-stage reward is

    R = alpha * (r_v + r_rep) * r_f + beta * r_tag + gamma * r_prmu

and the exploratory stage keeps only ``(r_v + r_rep) * r_f``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

from .tags import TagRegistry, parse_chain, validate
from .text_metrics import ngram_stats, rouge1, rougeL, tokenize

TaskKind = Literal["classification", "generation"]
TASK_KINDS = ("classification", "generation")

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"


@dataclass(frozen=True)
class RewardWeights:
    alpha: float = 0.8
    beta: float = 0.8
    gamma: float = 0.2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("reward weights must be nonnegative")


@dataclass(frozen=True)
class RepetitionConfig:
    n: int = 4
    delta: float = 1e-6

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n-gram size must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class RewardBreakdown:
    r_v: float
    r_f: float
    r_rep: float
    r_tag: float
    r_prmu: float
    composite: float
    foundation: float

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_label(text: str) -> str:
    return text.strip().lower()


def verifiable_reward(kind: str, y: str, y_star: str, generation_metric: str = "rouge1") -> float:
    if kind == "classification":
        return 1.0 if normalize_label(y) == normalize_label(y_star) else 0.0
    if kind == "generation":
        return rougeL(y, y_star) if generation_metric == "rougeL" else rouge1(y, y_star)
    raise ValueError(f"unknown task kind {kind!r}")


def split_reasoning(raw: str, think_open: str = THINK_OPEN, think_close: str = THINK_CLOSE) -> tuple[str | None, str]:
    """Return ``(reasoning, answer)``; reasoning is ``None`` without a think block."""
    i = raw.find(think_open)
    j = raw.find(think_close, i + len(think_open)) if i >= 0 else -1
    if i < 0 or j < 0:
        return None, raw.strip()
    return raw[i + len(think_open):j], raw[j + len(think_close):].strip()


def format_reward(raw: str, think_open: str = THINK_OPEN, think_close: str = THINK_CLOSE) -> float:
    """1.0 iff ``raw`` is exactly one think block followed by a non-empty answer."""
    if raw.count(think_open) != 1 or raw.count(think_close) != 1:
        return 0.0
    i = raw.find(think_open)
    j = raw.find(think_close)
    if j < i or raw[:i].strip():
        return 0.0
    return 1.0 if raw[j + len(think_close):].strip() else 0.0


def repetition_reward(raw: str, cfg: RepetitionConfig = RepetitionConfig()) -> float:
    stats = ngram_stats(tokenize(raw), cfg.n)
    if stats.total == 0:
        return 0.0
    return -(stats.total - stats.unique) / (stats.total + cfg.delta)


def tag_reward(raw: str, registry: TagRegistry, think_open: str = THINK_OPEN,
               think_close: str = THINK_CLOSE) -> float:
    reasoning, _ = split_reasoning(raw, think_open, think_close)
    chain = parse_chain(raw if reasoning is None else reasoning)
    return 0.0 if validate(chain, registry).passes else -1.0


def composite_reward(r_v: float, r_rep: float, r_f: float, r_tag: float, r_prmu: float,
                     w: RewardWeights = RewardWeights()) -> float:
    return w.alpha * (r_v + r_rep) * r_f + w.beta * r_tag + w.gamma * r_prmu


def foundation_reward(r_v: float, r_rep: float, r_f: float) -> float:
    return (r_v + r_rep) * r_f


@dataclass
class RewardContext:
    """Configuration shared by every response scored in a run."""

    registry: TagRegistry = field(default_factory=TagRegistry)
    weights: RewardWeights = field(default_factory=RewardWeights)
    repetition: RepetitionConfig = field(default_factory=RepetitionConfig)
    think_open: str = THINK_OPEN
    think_close: str = THINK_CLOSE
    generation_metric: str = "rouge1"


def score_response(ctx: RewardContext, raw: str, kind: str, gold: str,
                   prmu_scorer: Callable[[str, str, str], float] | None = None) -> RewardBreakdown:
    """All five signals for ``raw``.

    ``prmu_scorer`` maps ``(raw, reasoning, answer)`` into (0, 1); without one
    the personalization term takes the untrained value 0.5.
    """
    reasoning, answer = split_reasoning(raw, ctx.think_open, ctx.think_close)
    r_v = verifiable_reward(kind, answer, gold, ctx.generation_metric)
    r_f = format_reward(raw, ctx.think_open, ctx.think_close)
    r_rep = repetition_reward(raw, ctx.repetition)
    r_tag = tag_reward(raw, ctx.registry, ctx.think_open, ctx.think_close)
    r_prmu = prmu_scorer(raw, reasoning or "", answer) if prmu_scorer is not None else 0.5
    return RewardBreakdown(
        r_v=r_v, r_f=r_f, r_rep=r_rep, r_tag=r_tag, r_prmu=r_prmu,
        composite=composite_reward(r_v, r_rep, r_f, r_tag, r_prmu, ctx.weights),
        foundation=foundation_reward(r_v, r_rep, r_f),
    )
