"""Desk-scale run: PRMU, SFT, guided RL, exploratory RL, then held-out evaluation."""

import time

from tagpr import experiment as ex
from tagpr.config import desk_config
from tagpr.evaluation import evaluate, oracle_responder, policy_responder, uniform_responder

cfg = desk_config()
env, ctx = ex.build_env(cfg), ex.reward_context(cfg)
tasks = ex.eval_tasks(cfg, env)
t0 = time.perf_counter()


def show(name, bundle):
    acc = bundle.metrics["classification"]["accuracy"]
    print(f"{name:22s} accuracy {acc:.3f}  compliance {bundle.tag_compliance:.3f}  "
          f"mean chain {bundle.chain_length['mean']:.1f}  [{time.perf_counter() - t0:.0f}s]", flush=True)


def show_policy(name, params, enc):
    show(name + " (greedy)", evaluate(tasks, policy_responder(params, enc, 0.0), ctx))
    show(name + " (sampled)", evaluate(tasks, policy_responder(params, enc, 1.0, cfg.eval.seed), ctx))


show("uniform", evaluate(tasks, uniform_responder(env, ctx), ctx))
show("oracle", evaluate(tasks, oracle_responder(env, ctx), ctx))
prmu, _ = ex.run_prmu(cfg, env)
params, enc, _ = ex.run_sft(cfg, env)
show_policy("sft", params, enc)
params, _ = ex.run_rl(cfg, env, params, enc, "guided", prmu)
show_policy("guided rl", params, enc)
params, _ = ex.run_rl(cfg, env, params, enc, "exploratory")
show_policy("exploratory rl", params, enc)
