import math

import numpy as np
import pytest

from tagpr.env import EnvConfig, SynthEnv
from tagpr.gspo import (GspoConfig, RolloutGroup, chain_length, clipped_term, gspo_objective, gspo_ratio,
                        policy_gradient, standardize_advantages, train_stage)
from tagpr.policy import SftConfig, new_policy, sample_sequence, sequence_logprob, target_symbols, train_sft
from tagpr.prmu import PrmuModel
from tagpr.rewards import RewardContext
from tagpr.tags import TagRegistry

from oracles import central_diff, rel_err

REG = TagRegistry()
ENV_CFG = EnvConfig()
CTX = RewardContext(registry=REG)


@pytest.fixture(scope="module")
def env():
    return SynthEnv(ENV_CFG)


def _policy(seed, scale=0.3):
    params, enc = new_policy(REG, ENV_CFG)
    rng = np.random.default_rng(seed)
    return params.with_theta(rng.normal(scale=scale, size=params.theta.shape)), enc


def _groups(params, enc, tasks, rewards_seed, G=4, max_len=8):
    rng = np.random.default_rng(rewards_seed)
    groups = []
    for k, t in enumerate(tasks):
        prompt = enc(t)
        ros = [sample_sequence(params, prompt, np.random.default_rng([rewards_seed, k, i]), max_len=max_len)
               for i in range(G)]
        for ro in ros:
            ro.reward = float(rng.normal())
        groups.append(RolloutGroup(prompt, ros, standardize_advantages([r.reward for r in ros]), task=t))
    return groups


def test_advantages_example():
    a = standardize_advantages([1, 0, 1, 0, 1])
    assert np.allclose(a, [0.8165, -1.2247, 0.8165, -1.2247, 0.8165], atol=1e-4)
    assert a.mean() == pytest.approx(0.0, abs=1e-12)
    assert not standardize_advantages([0.3] * 5).any()
    with pytest.raises(ValueError):
        standardize_advantages([1.0])


def test_advantages_shift_scale_invariant():
    r = np.random.default_rng(0).normal(size=6)
    assert np.allclose(standardize_advantages(r), standardize_advantages(3.0 * r - 7.0), atol=1e-12)


def test_clip_example():
    s = math.exp(0.004 / 4)
    assert s == pytest.approx(1.0010005, abs=1e-7)
    value, live = clipped_term(1.0010005, 1.0, 0.0003, 0.0004)
    assert value == 1.0 + 0.0004 and not live
    value, live = clipped_term(0.5, 1.0, 0.0003, 0.0004)
    assert value == 0.5 and live
    value, live = clipped_term(0.5, -1.0, 0.0003, 0.0004)
    assert value == -(1.0 - 0.0003) and not live


def test_ratio(env):
    params, enc = _policy(0)
    other, _ = _policy(1)
    t = env.tasks(1, seed=0)[0]
    prompt = enc(t)
    ro = sample_sequence(params, prompt, np.random.default_rng(0), max_len=12)
    assert abs(gspo_ratio(params, params, ro.tokens, prompt) - 1.0) < 1e-12
    gap = sequence_logprob(other, ro.tokens, prompt) - sequence_logprob(params, ro.tokens, prompt)
    s = gspo_ratio(other, params, ro.tokens, prompt)
    assert s == pytest.approx(math.exp(gap / len(ro.tokens)), rel=1e-12)
    assert s * gspo_ratio(params, other, ro.tokens, prompt) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        gspo_ratio(params, params, [], prompt)


def test_gradient_at_old_params_is_policy_gradient(env):
    params, enc = _policy(2)
    groups = _groups(params, enc, env.tasks(3, seed=1), 5)
    obj, grad = gspo_objective(params, params, groups, GspoConfig())
    assert abs(obj) < 1e-12
    for g in groups:
        assert np.all(np.abs(g.ratios - 1.0) < 1e-12)
    ref = policy_gradient(params, groups)
    assert rel_err(grad, ref) < 1e-10


def test_equal_rewards_zero_gradient(env):
    params, enc = _policy(3)
    groups = _groups(params, enc, env.tasks(2, seed=2), 6)
    for g in groups:
        for ro in g.rollouts:
            ro.reward = 0.7
        g.advantages = standardize_advantages(g.rewards)
    _, grad = gspo_objective(params, params, groups, GspoConfig())
    assert np.linalg.norm(grad) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_objective_gradient_finite_differences(env, seed):
    old, enc = _policy(10 + seed)
    groups = _groups(old, enc, env.tasks(2, seed=3 + seed), 20 + seed, G=3, max_len=6)
    rng = np.random.default_rng(seed)
    params = old.with_theta(old.theta + rng.normal(scale=1e-3, size=old.theta.shape))
    cfg = GspoConfig(eps_low=0.5, eps_high=0.5)
    _, grad = gspo_objective(params, old, groups, cfg)
    rows = rng.choice(params.theta.shape[0], size=4, replace=False)
    cols = rng.choice(params.theta.shape[1], size=30, replace=False)
    idx = [(r, c) for r in rows for c in cols]
    theta = params.theta
    sub = np.array([theta[i] for i in idx])

    def f(x):
        th = theta.copy()
        for (r, c), v in zip(idx, x):
            th[r, c] = v
        return gspo_objective(params.with_theta(th), old, groups, cfg)[0]

    assert rel_err(np.array([grad[i] for i in idx]), central_diff(f, sub)) < 1e-4


def test_advantage_scaling_rescales_update(env):
    params, enc = _policy(4)
    groups = _groups(params, enc, env.tasks(2, seed=4), 7)
    _, g1 = gspo_objective(params, params, groups, GspoConfig())
    for g in groups:
        g.advantages = standardize_advantages(5.0 * g.rewards + 2.0)
    _, g2 = gspo_objective(params, params, groups, GspoConfig())
    assert np.allclose(g1, g2, atol=1e-12)


def test_chain_length():
    assert chain_length("<think> <a> w1 w2 </a> </think> label_0") == 4
    assert chain_length("w1") == 1


def _stage(env, **kw):
    # a briefly supervised start so rollouts differ in reward
    params, enc = new_policy(REG, ENV_CFG)
    ex = [(enc(t), target_symbols(*env.oracle_responder(t))) for t in env.tasks(40, seed=7)]
    params, _ = train_sft(params, ex, SftConfig(lr=0.3, epochs=2, batch_size=8))
    tasks = env.tasks(8, seed=6)
    cfg = GspoConfig(G=4, lr=0.5, batch_size=4, max_len=32, **kw)
    return params, enc, tasks, cfg


def test_train_stage_shapes_and_determinism(env):
    params, enc, tasks, cfg = _stage(env, epochs=2)
    seen = []
    p1, rows1 = train_stage(params, tasks, "exploratory", CTX, cfg, enc, callback=seen.append)
    p2, rows2 = train_stage(params, tasks, "exploratory", CTX, cfg, enc)
    assert len(rows1) == 2 * 2 and seen == rows1
    assert rows1 == rows2 and np.array_equal(p1.theta, p2.theta)
    assert set(rows1[0]) == {"stage", "epoch", "batch", "mean_reward", "tag_compliance", "mean_len", "objective"}
    assert not np.array_equal(p1.theta, params.theta)


def test_train_stage_zero_epochs_and_errors(env):
    params, enc, tasks, cfg = _stage(env, epochs=0)
    p, rows = train_stage(params, tasks, "exploratory", CTX, cfg, enc)
    assert rows == [] and np.array_equal(p.theta, params.theta)
    with pytest.raises(ValueError):
        train_stage(params, tasks, "guided", CTX, cfg, enc)
    with pytest.raises(ValueError):
        train_stage(params, tasks, "other", CTX, cfg, enc)
    with pytest.raises(ValueError):
        train_stage(params, [], "exploratory", CTX, cfg, enc)
    p, rows = train_stage(params, tasks, "guided", CTX, GspoConfig(G=2, epochs=1, batch_size=8, max_len=8),
                          enc, prmu=PrmuModel(dim=64))
    assert len(rows) == 1 and rows[0]["stage"] == "guided"


def test_config_validation():
    with pytest.raises(ValueError):
        GspoConfig(G=1)
    with pytest.raises(ValueError):
        GspoConfig(eps_low=0.0)
    with pytest.raises(ValueError):
        GspoConfig(inner_steps=0)
