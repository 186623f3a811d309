"""Synthetic personalization world with known per-user rules.

Items are feature vectors ``x = [1, z_1..z_d]``. Every user labels an item with
``argmax_c (W_c + U_c) . x`` where ``W`` is shared across the population and
``U`` is the user's own offset matrix; the leading constant coordinate makes
part of ``U`` a per-user class bias, which the user's history reveals.
Generation targets are two item-determined content symbols followed by the
user's four style symbols.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .tags import TagRegistry


@dataclass(frozen=True)
class EnvConfig:
    n_classes: int = 4
    item_dim: int = 6
    n_content: int = 12
    n_users: int = 32
    history_len: int = 40
    profile_k: int = 8
    retrieval: str = "recency"
    task_kinds: tuple[str, ...] = ("classification",)
    prototype_scale: float = 0.6
    bias_scale: float = 1.5
    offset_scale: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task_kinds", tuple(self.task_kinds))
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.item_dim < 2:
            raise ValueError("item_dim counts the constant coordinate; need >= 2")
        if self.n_content < max(4, 2 * (self.item_dim - 1)):
            raise ValueError("n_content too small for query tokens and style tokens")
        if self.retrieval not in ("recency", "random"):
            raise ValueError(f"unknown retrieval {self.retrieval!r}")
        if self.profile_k < 1 or self.history_len < 1:
            raise ValueError("profile_k and history_len must be positive")
        for kind in self.task_kinds:
            if kind not in ("classification", "generation"):
                raise ValueError(f"unknown task kind {kind!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "EnvConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown env keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_kinds"] = list(self.task_kinds)
        return d


def label_symbol(c: int) -> str:
    return f"label_{c}"


def content_symbol(i: int) -> str:
    return f"w{i}"


@dataclass
class SynthUser:
    user_id: str
    offsets: np.ndarray  # (n_classes, item_dim)
    style: tuple[str, ...]


@dataclass
class ProfileItem:
    time: int
    item: np.ndarray
    query: str
    response: str


@dataclass
class TaskInstance:
    task_id: str
    kind: str
    user_id: str
    item: np.ndarray
    query: str
    profile: list[ProfileItem]
    gold: str

    def profile_pairs(self) -> list[tuple[str, str]]:
        return [(p.query, p.response) for p in self.profile]


@dataclass
class SynthEnv:
    config: EnvConfig = field(default_factory=EnvConfig)
    prototypes: np.ndarray | None = None
    users: list[SynthUser] = field(default_factory=list)

    def __post_init__(self):
        if self.prototypes is None:
            rng = np.random.default_rng([self.config.seed, 0])
            K, D = self.config.n_classes, self.config.item_dim
            self.prototypes = rng.normal(0.0, self.config.prototype_scale, size=(K, D))
            self.prototypes[:, 0] = 0.0
            self.users = [
                self.sample_user(np.random.default_rng([self.config.seed, 1, i]), f"u{i:04d}")
                for i in range(self.config.n_users)
            ]
        self._by_id = {u.user_id: u for u in self.users}

    def user(self, user_id: str) -> SynthUser:
        return self._by_id[user_id]

    # -- users and rules -------------------------------------------------

    def sample_user(self, rng: np.random.Generator, user_id: str | None = None) -> SynthUser:
        cfg = self.config
        offsets = rng.normal(0.0, cfg.offset_scale, size=(cfg.n_classes, cfg.item_dim))
        offsets[:, 0] = rng.normal(0.0, cfg.bias_scale, size=cfg.n_classes)
        style = tuple(content_symbol(int(i)) for i in rng.choice(cfg.n_content, size=4, replace=False))
        if user_id is None:
            user_id = f"u{int(rng.integers(0, 10**9)):09d}"
        return SynthUser(user_id=user_id, offsets=offsets, style=style)

    def sample_item(self, rng: np.random.Generator) -> np.ndarray:
        return np.concatenate([[1.0], rng.normal(size=self.config.item_dim - 1)])

    def class_index(self, user: SynthUser, item: np.ndarray) -> int:
        return int(np.argmax((self.prototypes + user.offsets) @ item))

    def majority_index(self, item: np.ndarray) -> int:
        return int(np.argmax(self.prototypes @ item))

    def query_tokens(self, item: np.ndarray) -> tuple[str, str]:
        z = item[1:]
        return content_symbol(int(np.argmax(z))), content_symbol(len(z) + int(np.argmin(z)))

    def gold_for(self, user: SynthUser, item: np.ndarray, kind: str) -> str:
        if kind == "classification":
            return label_symbol(self.class_index(user, item))
        return " ".join(self.query_tokens(item) + user.style)

    def majority_answer(self, item: np.ndarray, kind: str) -> str:
        if kind == "classification":
            return label_symbol(self.majority_index(item))
        return " ".join(self.query_tokens(item))

    def render_query(self, item: np.ndarray, kind: str) -> str:
        verb = "classify" if kind == "classification" else "describe"
        feats = " ".join(f"f{i}{'p' if v > 0 else 'n'}" for i, v in enumerate(item[1:], 1))
        return f"{verb} item {feats}"

    # -- tasks ------------------------------------------------------------

    def sample_task(self, user: SynthUser, rng: np.random.Generator, k: int | None = None,
                    retrieval: str | None = None, kind: str | None = None,
                    task_id: str = "t") -> TaskInstance:
        cfg = self.config
        k = cfg.profile_k if k is None else k
        retrieval = retrieval or cfg.retrieval
        if k < 1:
            raise ValueError("k must be >= 1")
        if kind is None:
            kind = cfg.task_kinds[int(rng.integers(len(cfg.task_kinds)))]
        history = []
        for t in range(cfg.history_len):
            item = self.sample_item(rng)
            history.append(ProfileItem(t, item, self.render_query(item, kind), self.gold_for(user, item, kind)))
        item = self.sample_item(rng)
        if retrieval == "recency":
            profile = history[-k:]
        elif retrieval == "random":
            idx = sorted(rng.choice(len(history), size=min(k, len(history)), replace=False))
            profile = [history[i] for i in idx]
        else:
            raise ValueError(f"unknown retrieval {retrieval!r}")
        return TaskInstance(
            task_id=task_id, kind=kind, user_id=user.user_id, item=item,
            query=self.render_query(item, kind), profile=list(profile),
            gold=self.gold_for(user, item, kind),
        )

    def tasks(self, n: int, seed: int, kind: str | None = None, k: int | None = None,
              retrieval: str | None = None, prefix: str = "t") -> list[TaskInstance]:
        """``n`` tasks over the user population, a pure function of ``seed``."""
        out = []
        for i in range(n):
            rng = np.random.default_rng([self.config.seed, 2, seed, i])
            user = self.users[int(rng.integers(len(self.users)))]
            out.append(self.sample_task(user, rng, k=k, retrieval=retrieval, kind=kind,
                                        task_id=f"{prefix}{seed}-{i}"))
        return out

    # -- reference responders ---------------------------------------------

    def oracle_responder(self, task: TaskInstance, with_profile: bool = True,
                         registry: TagRegistry | None = None,
                         rng: np.random.Generator | None = None,
                         extra_tag_prob: float = 0.5) -> tuple[str, str]:
        """Minimal valid tagged chain plus the gold answer (or the population answer without profile).

        With ``rng`` the optional middle tags are each inserted with
        probability ``extra_tag_prob`` so chain lengths vary.
        """
        registry = registry or TagRegistry()
        names = registry.names
        n_min = min(registry.min_tag_count, len(names))
        head = list(names[:n_min - 1])
        last = names[-1] if names[-1] not in head else None
        middle = [t for t in names[n_min - 1:-1]]
        if rng is not None:
            middle = [t for t in middle if rng.random() < extra_tag_prob]
        else:
            middle = []
        order = head + middle + ([last] if last else [])

        answer = self.gold_for(self.user(task.user_id), task.item, task.kind) if with_profile \
            else self.majority_answer(task.item, task.kind)
        q1, q2 = self.query_tokens(task.item)
        evidence = self._profile_evidence(task) if with_profile else self.majority_answer(task.item, task.kind).split()[0]
        bodies = []
        for pos, tag in enumerate(order):
            if pos == 0:
                bodies.append(q1)
            elif pos == len(order) - 1 and last:
                bodies.append(answer.split()[0])
            elif pos == 1:
                bodies.append(evidence)
            else:
                bodies.append(q2)
        chain = " ".join(f"<{t}> {b} </{t}>" for t, b in zip(order, bodies))
        return chain, answer

    def _profile_evidence(self, task: TaskInstance) -> str:
        counts: dict[str, int] = {}
        for p in task.profile:
            tok = p.response.split()[0] if task.kind == "classification" else p.response.split()[-1]
            counts[tok] = counts.get(tok, 0) + 1
        return min(counts, key=lambda s: (-counts[s], s))

    # -- persistence ----------------------------------------------------------

    def dump(self, path: str | Path) -> None:
        path = Path(path)
        lines = [json.dumps({"record": "env", "config": self.config.to_dict(),
                             "prototypes": self.prototypes.tolist()}, sort_keys=True)]
        for u in self.users:
            lines.append(json.dumps({"record": "user", "user_id": u.user_id,
                                     "offsets": u.offsets.tolist(), "style": list(u.style)}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SynthEnv":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        head = rows[0]
        if head.get("record") != "env":
            raise ValueError(f"{path}: first line must be the env header")
        users = [SynthUser(r["user_id"], np.asarray(r["offsets"], dtype=float), tuple(r["style"]))
                 for r in rows[1:] if r.get("record") == "user"]
        return cls(config=EnvConfig.from_dict(head["config"]),
                   prototypes=np.asarray(head["prototypes"], dtype=float), users=users)


def task_to_dict(task: TaskInstance) -> dict:
    return {
        "task_id": task.task_id, "task_kind": task.kind, "user_id": task.user_id,
        "item": task.item.tolist(), "query": task.query, "gold": task.gold,
        "profile": [{"time": p.time, "item": p.item.tolist(), "query": p.query, "response": p.response}
                    for p in task.profile],
    }


def task_from_dict(d: dict) -> TaskInstance:
    return TaskInstance(
        task_id=d["task_id"], kind=d["task_kind"], user_id=d["user_id"],
        item=np.asarray(d["item"], dtype=float), query=d["query"], gold=d["gold"],
        profile=[ProfileItem(p["time"], np.asarray(p["item"], dtype=float), p["query"], p["response"])
                 for p in d["profile"]],
    )


def dump_tasks(tasks: Sequence[TaskInstance], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(task_to_dict(t), sort_keys=True) + "\n" for t in tasks))


def load_tasks(path: str | Path) -> list[TaskInstance]:
    return [task_from_dict(json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]
