"""Wiring from a :class:`RunConfig` to the training stages.

Every task set is drawn from its own seed stream so PRMU data, SFT chains,
RL prompts and the held-out evaluation set never share instances.
"""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .env import SynthEnv, TaskInstance
from .gspo import GspoConfig, train_stage
from .policy import PolicyParams, PromptEncoder, SftConfig, new_policy, target_symbols, train_sft
from .prmu import (NoisyResponder, PrmuModel, PrmuTrainConfig, build_pqp_dataset, build_prp_dataset,
                   oracle_generator, train_prmu)
from .rewards import RewardContext

# offsets that keep the seed streams of the task sets apart
PRP_STREAM, PQP_STREAM, SFT_STREAM, RL_STREAM = 1, 2, 10_000, 20_000


def build_env(cfg: RunConfig) -> SynthEnv:
    return SynthEnv(cfg.env)


def reward_context(cfg: RunConfig) -> RewardContext:
    r = cfg.rewards
    return RewardContext(registry=cfg.registry, weights=r.weights, repetition=cfg.repetition,
                         think_open=r.think_open, think_close=r.think_close,
                         generation_metric=r.generation_metric)


def prmu_datasets(cfg: RunConfig, env: SynthEnv):
    prp = build_prp_dataset(env, oracle_generator(env, cfg.registry), cfg.prmu.n_prp,
                            seed=cfg.seed * 100 + PRP_STREAM)
    pqp = build_pqp_dataset(env, NoisyResponder(env, cfg.prmu.pqp_noise, cfg.registry), cfg.prmu.n_pqp,
                            seed=cfg.seed * 100 + PQP_STREAM)
    return prp, pqp


def run_prmu(cfg: RunConfig, env: SynthEnv, pairs=None) -> tuple[PrmuModel, list[float]]:
    if pairs is None:
        prp, pqp = prmu_datasets(cfg, env)
        pairs = prp + pqp
    p = cfg.prmu
    return train_prmu(PrmuModel(dim=p.dim), pairs,
                      PrmuTrainConfig(lr=p.lr, epochs=p.epochs, batch_size=p.batch_size, seed=cfg.seed))


def sft_tasks(cfg: RunConfig, env: SynthEnv) -> list[TaskInstance]:
    return env.tasks(cfg.sft.n_examples, seed=cfg.seed + SFT_STREAM, prefix="sft")


def sft_examples(cfg: RunConfig, env: SynthEnv, encoder: PromptEncoder, tasks=None):
    """Oracle chains with a random subset of the optional middle tags."""
    tasks = sft_tasks(cfg, env) if tasks is None else tasks
    out = []
    for i, t in enumerate(tasks):
        chain, answer = env.oracle_responder(t, registry=cfg.registry,
                                             rng=np.random.default_rng([cfg.seed, SFT_STREAM, i]),
                                             extra_tag_prob=cfg.sft.extra_tag_prob)
        out.append((encoder(t), target_symbols(chain, answer, cfg.rewards.think_open, cfg.rewards.think_close)))
    return out


def run_sft(cfg: RunConfig, env: SynthEnv) -> tuple[PolicyParams, PromptEncoder, list[float]]:
    params, enc = new_policy(cfg.registry, cfg.env, think_open=cfg.rewards.think_open,
                             think_close=cfg.rewards.think_close)
    s = cfg.sft
    params, losses = train_sft(params, sft_examples(cfg, env, enc),
                               SftConfig(lr=s.lr, epochs=s.epochs, batch_size=s.batch_size, seed=cfg.seed))
    return params, enc, losses


def rl_tasks(cfg: RunConfig, env: SynthEnv) -> list[TaskInstance]:
    return env.tasks(cfg.schedule.rl_prompts, seed=cfg.seed + RL_STREAM, prefix="rl")


def eval_tasks(cfg: RunConfig, env: SynthEnv) -> list[TaskInstance]:
    return env.tasks(cfg.eval.n_tasks, seed=cfg.eval.seed, prefix="eval")


def gspo_config(cfg: RunConfig, stage: str) -> GspoConfig:
    g = cfg.gspo
    epochs = cfg.schedule.guided_epochs if stage == "guided" else cfg.schedule.exploratory_epochs
    return GspoConfig(G=g.G, eps_low=g.eps_low, eps_high=g.eps_high, temperature=g.temperature,
                      top_p=g.top_p, lr=g.lr, epochs=epochs, batch_size=g.batch_size, max_len=g.max_len,
                      eps_std=g.eps_std, inner_steps=g.inner_steps, seed=cfg.seed)


def run_rl(cfg: RunConfig, env: SynthEnv, params: PolicyParams, encoder: PromptEncoder, stage: str,
           prmu: PrmuModel | None = None, callback=None) -> tuple[PolicyParams, list[dict]]:
    """One RL stage; the PRMU model stays frozen throughout."""
    return train_stage(params, rl_tasks(cfg, env), stage, reward_context(cfg), gspo_config(cfg, stage),
                       encoder, prmu=prmu, callback=callback)
