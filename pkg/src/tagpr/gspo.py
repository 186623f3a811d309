"""Group sequence policy optimization for the toy policy.

For each prompt, ``G`` responses are sampled from the frozen policy, their
rewards are standardized within the group, and the policy ascends

    mean_i min(s_i * A_i, clip(s_i, 1 - eps_low, 1 + eps_high) * A_i)

with ``s_i`` the length-normalized sequence likelihood ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import TaskInstance
from .policy import (PolicyParams, PromptEncoder, Rollout, context_features, logprob_and_grad,
                     sample_sequence, sequence_logprob)
from .prmu import PrmuModel, scorer_for
from .rewards import RewardContext, score_response, split_reasoning
from .text_metrics import tokenize

STAGES = ("guided", "exploratory")


@dataclass(frozen=True)
class GspoConfig:
    G: int = 5
    eps_low: float = 0.0003
    eps_high: float = 0.0004
    temperature: float = 1.0
    top_p: float = 1.0
    lr: float = 1e-6
    epochs: int = 13
    batch_size: int = 128
    max_len: int = 32
    eps_std: float = 1e-8
    inner_steps: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size G must be >= 2")
        if not (0 < self.eps_low < 1 and 0 < self.eps_high < 1):
            raise ValueError("clip ratios must lie in (0, 1)")
        if self.inner_steps < 1 or self.batch_size < 1 or self.max_len < 1:
            raise ValueError("inner_steps, batch_size and max_len must be positive")


@dataclass
class RolloutGroup:
    prompt: np.ndarray
    rollouts: list[Rollout]
    advantages: np.ndarray
    ratios: np.ndarray = field(default_factory=lambda: np.zeros(0))
    task: TaskInstance | None = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rollouts])


def standardize_advantages(rewards: Sequence[float], eps_std: float = 1e-8) -> np.ndarray:
    """``(r - mean) / std`` with the population std; zeros when the group has no spread."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std()
    if std < eps_std:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def gspo_ratio(params: PolicyParams, params_old: PolicyParams, tokens: Sequence[int],
               prompt: np.ndarray) -> float:
    if len(tokens) == 0:
        raise ValueError("ratio undefined for an empty rollout")
    gap = sequence_logprob(params, tokens, prompt) - sequence_logprob(params_old, tokens, prompt)
    return float(np.exp(gap / len(tokens)))


def clipped_term(s: float, adv: float, eps_low: float, eps_high: float) -> tuple[float, bool]:
    """Surrogate value and whether the unclipped branch is the one selected."""
    unclipped = s * adv
    clipped = min(max(s, 1.0 - eps_low), 1.0 + eps_high) * adv
    return (unclipped, True) if unclipped <= clipped else (clipped, False)


def gspo_objective(params: PolicyParams, params_old: PolicyParams, groups: Sequence[RolloutGroup],
                   cfg: GspoConfig) -> tuple[float, np.ndarray]:
    """Surrogate objective averaged uniformly over prompts, and its gradient."""
    if not groups:
        raise ValueError("need at least one rollout group")
    total = 0.0
    grad = np.zeros_like(params.theta)
    for g in groups:
        ratios = []
        for ro, adv in zip(g.rollouts, g.advantages):
            L = len(ro.tokens)
            lp, glp = logprob_and_grad(params, ro.tokens, g.prompt)
            s = float(np.exp((lp - sequence_logprob(params_old, ro.tokens, g.prompt)) / L))
            ratios.append(s)
            value, live = clipped_term(s, float(adv), cfg.eps_low, cfg.eps_high)
            total += value / len(g.rollouts)
            if live and adv != 0.0:
                grad += (adv * s / L / len(g.rollouts)) * glp
        g.ratios = np.array(ratios)
    return total / len(groups), grad / len(groups)


def policy_gradient(params: PolicyParams, groups: Sequence[RolloutGroup]) -> np.ndarray:
    """Plain estimator mean_g mean_i A_i * grad(log p_i / |y_i|), one position at a time."""
    V = len(params.vocab)
    grad = np.zeros_like(params.theta)
    for g in groups:
        for ro, adv in zip(g.rollouts, g.advantages):
            for t, y in enumerate(ro.tokens):
                phi = context_features(params, ro.tokens[:t], g.prompt)
                z = params.theta @ phi
                p = np.exp(z - z.max())
                p /= p.sum()
                onehot = np.zeros(V)
                onehot[y] = 1.0
                grad += adv / len(ro.tokens) / len(g.rollouts) * np.outer(onehot - p, phi)
    return grad / len(groups)


def chain_length(raw: str) -> int:
    """Token count of the reasoning part (the whole text when no think block)."""
    reasoning, _ = split_reasoning(raw)
    return len(tokenize(raw if reasoning is None else reasoning))


def _rollout_rng(seed: int, stage: str, epoch: int, batch: int, prompt: int, rollout: int):
    return np.random.default_rng([seed, STAGES.index(stage), epoch, batch, prompt, rollout])


def train_stage(params: PolicyParams, tasks: Sequence[TaskInstance], stage: str,
                reward_ctx: RewardContext, cfg: GspoConfig, encoder: PromptEncoder,
                prmu: PrmuModel | None = None,
                callback: Callable[[dict], None] | None = None) -> tuple[PolicyParams, list[dict]]:
    """Run one RL stage; returns the trained params and one log row per batch.

    ``guided`` scores rollouts with the composite reward (requires ``prmu``),
    ``exploratory`` with the foundation reward. The sampling policy is
    refreshed once per batch.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "guided" and prmu is None:
        raise ValueError("guided stage needs a PRMU model")
    if not tasks:
        raise ValueError("no training prompts")
    prompts = [encoder(t) for t in tasks]
    scorers = [scorer_for(prmu, t.user_id, t.query, t.profile_pairs()) if stage == "guided" else None
               for t in tasks]
    order_rng = np.random.default_rng([cfg.seed, STAGES.index(stage), 99])
    rows = []
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(tasks))
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            params_old = params.copy()
            groups, breakdowns = [], []
            for p in order[start:start + cfg.batch_size]:
                task = tasks[p]
                rollouts = []
                for i in range(cfg.G):
                    ro = sample_sequence(params_old, prompts[p], _rollout_rng(cfg.seed, stage, epoch, b, int(p), i),
                                         cfg.temperature, cfg.top_p, cfg.max_len)
                    bd = score_response(reward_ctx, ro.rendered_text, task.kind, task.gold, scorers[p])
                    ro.reward = bd.composite if stage == "guided" else bd.foundation
                    rollouts.append(ro)
                    breakdowns.append((bd, ro.rendered_text))
                adv = standardize_advantages([r.reward for r in rollouts], cfg.eps_std)
                groups.append(RolloutGroup(prompts[p], rollouts, adv, task=task))
            objective = 0.0
            for _ in range(cfg.inner_steps):
                _, grad = gspo_objective(params, params_old, groups, cfg)
                params = params.with_theta(params.theta + cfg.lr * grad)
                if not params.is_finite():
                    raise FloatingPointError(f"non-finite policy parameters in {stage} stage")
            objective, _ = gspo_objective(params, params_old, groups, cfg)
            row = {
                "stage": stage, "epoch": epoch, "batch": b,
                "mean_reward": float(np.mean([r.reward for g in groups for r in g.rollouts])),
                "tag_compliance": float(np.mean([bd.r_tag == 0.0 for bd, _ in breakdowns])),
                "mean_len": float(np.mean([chain_length(raw) for _, raw in breakdowns])),
                "objective": float(objective),
            }
            rows.append(row)
            if callback:
                callback(row)
    return params, rows
