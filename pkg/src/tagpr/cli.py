"""Command-line front end.

Exit codes: 0 success, 2 usage or config error, 3 missing prerequisite,
4 remote client failure.

Run directory layout::

    run.lock                  held while a command runs
    config.yaml               resolved configuration
    env.jsonl                 the synthetic world, shared by every stage
    checkpoints/{prmu,sft,rl-guided,rl-explore}.json
    metrics/<stage>.csv
    eval/<name>.json, eval/<name>.csv
    pipeline/dataset.jsonl, manifest.json, sample_report.md
    report.md, report.csv
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import experiment as ex
from .clients import ClientError, HttpGenerationClient, MockGenerator, MockJudge, MockTagger
from .config import ConfigError, RunConfig, dump_config, load_config
from .env import SynthEnv
from .evaluation import (EvalError, evaluate, oracle_responder, policy_responder, summary_row,
                         uniform_responder, write_eval)
from .pipeline import answer_key, pipeline_instances, run_pipeline
from .policy import PolicyParams
from .prmu import PrmuModel, scorer_for
from .rewards import TASK_KINDS, score_response

log = logging.getLogger("tagpr")

EXIT_OK, EXIT_USAGE, EXIT_PREREQ, EXIT_REMOTE = 0, 2, 3, 4

STAGES = ("prmu", "sft", "rl-guided", "rl-explore")
# stage -> checkpoints that must already exist
PREREQS = {"prmu": (), "sft": (), "rl-guided": ("sft", "prmu"), "rl-explore": ("rl-guided",)}
RL_STAGE = {"rl-guided": "guided", "rl-explore": "exploratory"}
RL_COLUMNS = ("stage", "epoch", "batch", "mean_reward", "tag_compliance", "mean_len", "objective")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- run directory -------------------------------------------------------------

@contextmanager
def run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / "run.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"run directory {run_dir} is in use (remove {lock} if no other run is active)",
                       EXIT_USAGE) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def checkpoint_path(run_dir: Path, stage: str) -> Path:
    return run_dir / "checkpoints" / f"{stage}.json"


def require(run_dir: Path, stage: str) -> Path:
    path = checkpoint_path(run_dir, stage)
    if not path.exists():
        raise CliError(f"missing prerequisite: {stage} checkpoint ({path}); "
                       f"run `tagpr train --stage {stage}` first", EXIT_PREREQ)
    return path


def shared_env(cfg: RunConfig, run_dir: Path) -> SynthEnv:
    """The run's world: created once, then reloaded so every stage sees the same users."""
    path = run_dir / "env.jsonl"
    if path.exists():
        env = SynthEnv.load(path)
        if env.config != cfg.env:
            raise CliError(f"{path} was built from a different env config; use a fresh run directory",
                           EXIT_USAGE)
        return env
    env = ex.build_env(cfg)
    env.dump(path)
    return env


def write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_policy(path: Path):
    params, enc, meta = PolicyParams.load(path)
    if enc is None:
        raise CliError(f"{path} carries no prompt encoder", EXIT_USAGE)
    return params, enc, meta


# -- commands -------------------------------------------------------------------

REQUIRED_FIELDS = ("task_kind", "chain", "answer", "gold")


def _parse_record(line: str, lineno: int, src: str) -> dict:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CliError(f"{src}:{lineno}: malformed JSON: {exc.msg}", EXIT_USAGE) from None
    if not isinstance(rec, dict):
        raise CliError(f"{src}:{lineno}: expected a JSON object", EXIT_USAGE)
    missing = [k for k in REQUIRED_FIELDS if not isinstance(rec.get(k), str)]
    if missing:
        raise CliError(f"{src}:{lineno}: missing or non-string fields {missing}", EXIT_USAGE)
    if rec["task_kind"] not in TASK_KINDS:
        raise CliError(f"{src}:{lineno}: unknown task_kind {rec['task_kind']!r}", EXIT_USAGE)
    if not rec["gold"].strip():
        raise CliError(f"{src}:{lineno}: empty gold answer", EXIT_USAGE)
    profile = rec.get("profile", [])
    if not isinstance(profile, list) or not all(isinstance(p, dict) and {"query", "response"} <= set(p)
                                                for p in profile):
        raise CliError(f"{src}:{lineno}: profile must be a list of {{query, response}} objects", EXIT_USAGE)
    return rec


def cmd_score(cfg: RunConfig, args) -> int:
    ctx = ex.reward_context(cfg)
    prmu = None
    if args.prmu:
        if not Path(args.prmu).exists():
            raise CliError(f"missing prerequisite: prmu checkpoint ({args.prmu})", EXIT_PREREQ)
        prmu = PrmuModel.load(args.prmu)
    src = Path(args.input)
    if not src.exists():
        raise CliError(f"input file {src} not found", EXIT_USAGE)
    # validate everything before writing anything
    records = [_parse_record(line, n, str(src))
               for n, line in enumerate(src.read_text().splitlines(), 1) if line.strip()]
    out = []
    for rec in records:
        raw = f"{ctx.think_open}{rec['chain']}{ctx.think_close}{rec['answer']}"
        scorer = None
        if prmu is not None:
            profile = [(p["query"], p["response"]) for p in rec.get("profile", [])]
            scorer = scorer_for(prmu, str(rec.get("user_id", "")), str(rec.get("query", "")), profile)
        bd = score_response(ctx, raw, rec["task_kind"], rec["gold"], scorer)
        out.append(json.dumps({**rec, "rewards": bd.to_dict()}, sort_keys=True) + "\n")
    Path(args.output).write_text("".join(out))
    log.info("scored %d records -> %s", len(out), args.output)
    return EXIT_OK


def _clients(cfg: RunConfig, env: SynthEnv, instances):
    if cfg.clients == "mock":
        seed = cfg.pipeline.seed
        return MockGenerator(answer_key(env, instances), seed=seed), MockJudge(seed=seed), MockTagger(seed=seed)
    try:
        return (HttpGenerationClient(seed=cfg.pipeline.seed), HttpGenerationClient(seed=cfg.pipeline.seed),
                HttpGenerationClient(seed=cfg.pipeline.seed))
    except ClientError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None


def cmd_pipeline(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir)
    env = shared_env(cfg, run_dir)
    instances = pipeline_instances(env, cfg.pipeline)
    gen, judge, tagger = _clients(cfg, env, instances)
    out_dir = run_dir / "pipeline"
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        manifest = run_pipeline(instances, cfg.pipeline, gen, judge, tagger, out_dir, config_echo=cfg.to_dict())
    except ClientError as exc:
        raise CliError(f"remote client failure: {exc}", EXIT_REMOTE) from None
    log.info("pipeline counts: %s", json.dumps(manifest["counts"]))
    if manifest["failures"]["instances"]:
        log.error("%d instances failed after retries; partial manifest at %s",
                  manifest["failures"]["instances"], out_dir / "manifest.json")
        return EXIT_REMOTE
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir)
    stage = args.stage
    for dep in PREREQS[stage]:
        require(run_dir, dep)
    env = shared_env(cfg, run_dir)
    ckpt = checkpoint_path(run_dir, stage)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    metrics = run_dir / "metrics" / f"{stage}.csv"
    if stage == "prmu":
        model, losses = ex.run_prmu(cfg, env)
        model.save(ckpt)
        write_csv(metrics, ("stage", "epoch", "loss"), [(stage, i, l) for i, l in enumerate(losses)])
    elif stage == "sft":
        params, enc, losses = ex.run_sft(cfg, env)
        params.save(ckpt, enc, meta={"stage": stage})
        per_epoch = max(1, len(losses) // max(cfg.sft.epochs, 1))
        write_csv(metrics, ("stage", "epoch", "batch", "loss"),
                  [(stage, i // per_epoch, i % per_epoch, l) for i, l in enumerate(losses)])
    else:
        params, enc, _ = _load_policy(require(run_dir, "sft" if stage == "rl-guided" else "rl-guided"))
        prmu = PrmuModel.load(require(run_dir, "prmu")) if stage == "rl-guided" else None
        params, rows = ex.run_rl(cfg, env, params, enc, RL_STAGE[stage], prmu,
                                 callback=lambda r: log.info("%s", r) if args.verbose else None)
        params.save(ckpt, enc, meta={"stage": stage})
        write_csv(metrics, RL_COLUMNS, [[r[c] for c in RL_COLUMNS] for r in rows])
    log.info("wrote %s and %s", ckpt, metrics)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir)
    env = shared_env(cfg, run_dir)
    ctx = ex.reward_context(cfg)
    tasks = ex.eval_tasks(cfg, env)
    name = args.checkpoint
    prmu_path = checkpoint_path(run_dir, "prmu")
    prmu = PrmuModel.load(prmu_path) if prmu_path.exists() else None
    if name == "oracle":
        bundles = [evaluate(tasks, oracle_responder(env, ctx), ctx, "oracle", prmu)]
    elif name == "uniform":
        bundles = [evaluate(tasks, uniform_responder(env, ctx, cfg.eval.seed), ctx, "uniform", prmu)]
    else:
        path = checkpoint_path(run_dir, name) if name in STAGES else Path(name)
        if not path.exists():
            raise CliError(f"missing prerequisite: {name} checkpoint ({path})", EXIT_PREREQ)
        params, enc, _ = _load_policy(path)
        max_len = cfg.gspo.max_len
        bundles = [
            evaluate(tasks, policy_responder(params, enc, 0.0, max_len=max_len), ctx, "greedy", prmu),
            evaluate(tasks, policy_responder(params, enc, cfg.eval.sample_temperature, cfg.eval.seed, max_len),
                     ctx, "sampled", prmu),
        ]
        name = path.stem
    (run_dir / "eval").mkdir(parents=True, exist_ok=True)
    js, cs = write_eval(run_dir / "eval" / name, bundles,
                        {"checkpoint": name, "n_tasks": len(tasks), "eval_seed": cfg.eval.seed})
    for b in bundles:
        acc = b.metrics.get("classification", {}).get("accuracy")
        log.info("%s/%s: accuracy=%s compliance=%.3f mean_len=%.2f", name, b.label, acc,
                 b.tag_compliance, b.chain_length["mean"])
    log.info("wrote %s and %s", js, cs)
    return EXIT_OK


REPORT_ORDER = ("uniform", "sft", "rl-guided", "rl-explore", "oracle")


def cmd_report(cfg: RunConfig, args) -> int:
    run_dir = Path(args.run_dir)
    files = sorted((run_dir / "eval").glob("*.json")) if (run_dir / "eval").exists() else []
    if not files:
        raise CliError(f"missing prerequisite: evaluation results in {run_dir / 'eval'}; run `tagpr eval` first",
                       EXIT_PREREQ)
    rank = {n: i for i, n in enumerate(REPORT_ORDER)}
    files.sort(key=lambda p: (rank.get(p.stem, len(rank)), p.stem))
    rows = []
    for f in files:
        data = json.loads(f.read_text())
        rows.append(summary_row(f.stem, {b["label"]: b for b in data["bundles"]}))
    sft_len = next((r["mean_chain_len"] for r in rows if r["checkpoint"] == "sft"), None)
    for r in rows:
        r["len_vs_sft"] = None if not sft_len else r["mean_chain_len"] / sft_len - 1.0
    header = list(rows[0])
    write_csv(run_dir / "report.csv", header, [[r[h] for h in header] for r in rows])

    def fmt(v):
        return "-" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

    lines = ["# Evaluation report", "",
             "Accuracy and F1 come from greedy decoding; tag compliance and chain length from "
             "sampled responses.", "",
             "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(fmt(r[h]) for h in header) + " |" for r in rows]
    for f in files:
        data = json.loads(f.read_text())
        for b in data["bundles"]:
            if b["tag_frequencies"]:
                lines += ["", f"## Tag frequencies: {f.stem} ({b['label']})", "", "| tag | share |", "|---|---|"]
                lines += [f"| {t} | {v:.3f} |" for t, v in b["tag_frequencies"].items()]
    (run_dir / "report.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[:6 + len(rows)]))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tagpr", description="Tagged personalized reasoning toolkit.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--run-dir", help="run directory (defaults to run_dir in the config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("score", parents=[common], help="score dataset records with every reward signal")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--prmu", help="PRMU checkpoint for the personalization term")

    sub.add_parser("pipeline", parents=[common], help="build a tagged-chain dataset")

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", required=True, choices=STAGES)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a reference responder")
    e.add_argument("--checkpoint", required=True,
                   help="stage name (sft, rl-guided, rl-explore), a checkpoint path, 'oracle' or 'uniform'")

    sub.add_parser("report", parents=[common], help="summarize every evaluation in the run directory")
    return p


COMMANDS = {"score": cmd_score, "pipeline": cmd_pipeline, "train": cmd_train, "eval": cmd_eval,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    args.run_dir = args.run_dir or cfg.run_dir
    try:
        if args.command == "score":
            return cmd_score(cfg, args)
        run_dir = Path(args.run_dir)
        with run_lock(run_dir):
            if not (run_dir / "config.yaml").exists():
                dump_config(cfg, run_dir / "config.yaml")
            return COMMANDS[args.command](cfg, args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (EvalError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
