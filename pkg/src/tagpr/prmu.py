"""Personalization reward model with user embeddings.

The scorer is linear in a hashed bag-of-tokens feature vector, with each
user's embedding acting as an additive offset on the shared weights::

    f(x) = (w + E_u) . phi(x) + b,      reward = sigmoid(f(x))

Training minimizes the Bradley-Terry loss ``-log sigmoid(f(x+) - f(x-))``
over preference pairs by plain mini-batch gradient descent.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .text_metrics import rouge1, tokenize

CHECKPOINT_VERSION = 1
DEFAULT_DIM = 512


@dataclass(frozen=True)
class PrmuInput:
    user_id: str
    query: str
    profile: tuple[tuple[str, str], ...]
    chain: str
    answer: str


@dataclass(frozen=True)
class PreferencePair:
    user_id: str
    query: str
    profile: tuple[tuple[str, str], ...]
    preferred: tuple[str, str]
    rejected: tuple[str, str]
    source: str

    def __post_init__(self):
        if self.preferred == self.rejected:
            raise ValueError("preferred and rejected responses must differ")
        if self.source not in ("PRP", "PQP", "synthetic"):
            raise ValueError(f"unknown pair source {self.source!r}")

    def inputs(self) -> tuple[PrmuInput, PrmuInput]:
        return (PrmuInput(self.user_id, self.query, self.profile, *self.preferred),
                PrmuInput(self.user_id, self.query, self.profile, *self.rejected))

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id, "query": self.query,
            "profile": [{"query": q, "response": r} for q, r in self.profile],
            "preferred": {"chain": self.preferred[0], "answer": self.preferred[1]},
            "rejected": {"chain": self.rejected[0], "answer": self.rejected[1]},
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreferencePair":
        return cls(
            user_id=d["user_id"], query=d["query"],
            profile=tuple((p["query"], p["response"]) for p in d["profile"]),
            preferred=(d["preferred"]["chain"], d["preferred"]["answer"]),
            rejected=(d["rejected"]["chain"], d["rejected"]["answer"]),
            source=d["source"],
        )


# -- features ---------------------------------------------------------------

def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def field_tokens(query: str, profile: Iterable[tuple[str, str]], chain: str, answer: str) -> list[str]:
    """Namespaced tokens so the same word in different fields hashes apart."""
    toks = [f"q:{t}" for t in tokenize(query)]
    for pq, pr in profile:
        toks += [f"pq:{t}" for t in tokenize(pq)]
        toks += [f"pr:{t}" for t in tokenize(pr)]
    toks += [f"c:{t}" for t in tokenize(chain)]
    toks += [f"a:{t}" for t in tokenize(answer)]
    return toks


def hashed_counts(tokens: Iterable[str], dim: int = DEFAULT_DIM) -> np.ndarray:
    v = np.zeros(dim)
    for tok, n in Counter(tokens).items():
        v[_bucket(tok, dim)] += n
    return v


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def featurize(x: PrmuInput, dim: int = DEFAULT_DIM) -> np.ndarray:
    """L2-normalized hashed bag of tokens; the user enters only through ``E_u``."""
    return _unit(hashed_counts(field_tokens(x.query, x.profile, x.chain, x.answer), dim))


# -- model ------------------------------------------------------------------

@dataclass
class PrmuModel:
    dim: int = DEFAULT_DIM
    w: np.ndarray | None = None
    b: float = 0.0
    users: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.w is None:
            self.w = np.zeros(self.dim)
        if self.w.shape != (self.dim,):
            raise ValueError(f"w has shape {self.w.shape}, expected ({self.dim},)")

    def embedding(self, user_id: str) -> np.ndarray:
        e = self.users.get(user_id)
        return np.zeros(self.dim) if e is None else e

    def copy(self) -> "PrmuModel":
        return PrmuModel(self.dim, self.w.copy(), float(self.b), {k: v.copy() for k, v in self.users.items()})

    def save(self, path: str | Path) -> None:
        payload = {
            "version": CHECKPOINT_VERSION, "kind": "prmu", "dim": self.dim,
            "w": self.w.tolist(), "b": self.b,
            "users": {k: self.users[k].tolist() for k in sorted(self.users)},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "PrmuModel":
        d = json.loads(Path(path).read_text())
        if d.get("kind") != "prmu" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} PRMU checkpoint")
        return cls(dim=d["dim"], w=np.asarray(d["w"], dtype=float), b=float(d["b"]),
                   users={k: np.asarray(v, dtype=float) for k, v in d["users"].items()})


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def score_features(model: PrmuModel, user_id: str, phi: np.ndarray) -> float:
    return float((model.w + model.embedding(user_id)) @ phi + model.b)


def score(model: PrmuModel, x: PrmuInput) -> float:
    """Pre-sigmoid logit."""
    return score_features(model, x.user_id, featurize(x, model.dim))


def prmu_reward(model: PrmuModel, x: PrmuInput) -> float:
    return sigmoid(score(model, x))


def scorer_for(model: PrmuModel, user_id: str, query: str,
               profile: Sequence[tuple[str, str]]) -> Callable[[str, str, str], float]:
    """Reward callable for one prompt; the query/profile counts are hashed once."""
    base = hashed_counts(field_tokens(query, profile, "", ""), model.dim)
    weights = model.w + model.embedding(user_id)

    def _score(raw: str, chain: str, answer: str) -> float:
        phi = _unit(base + hashed_counts(field_tokens("", (), chain, answer), model.dim))
        return sigmoid(float(weights @ phi + model.b))

    return _score


# -- Bradley-Terry loss and gradient ----------------------------------------

@dataclass
class PairBatch:
    """Pre-featurized pairs: rows of ``pos``/``neg`` share ``user_ids``."""

    pos: np.ndarray
    neg: np.ndarray
    user_ids: list[str]

    @classmethod
    def from_pairs(cls, pairs: Sequence[PreferencePair], dim: int) -> "PairBatch":
        if not pairs:
            raise ValueError("empty preference batch")
        pos, neg = zip(*(tuple(featurize(x, dim) for x in p.inputs()) for p in pairs))
        return cls(np.array(pos), np.array(neg), [p.user_id for p in pairs])

    def subset(self, idx) -> "PairBatch":
        return PairBatch(self.pos[idx], self.neg[idx], [self.user_ids[i] for i in idx])

    def __len__(self) -> int:
        return len(self.user_ids)


@dataclass
class PrmuGrad:
    w: np.ndarray
    b: float
    users: dict[str, np.ndarray]


def _as_batch(model: PrmuModel, pairs) -> PairBatch:
    if isinstance(pairs, PairBatch):
        return pairs
    return PairBatch.from_pairs(list(pairs), model.dim)


def _gaps(model: PrmuModel, batch: PairBatch) -> np.ndarray:
    E = np.array([model.embedding(u) for u in batch.user_ids])
    return np.einsum("ij,ij->i", model.w + E, batch.pos - batch.neg)


def bt_loss(model: PrmuModel, pairs) -> float:
    """Mean of ``-log sigmoid(score(x+) - score(x-))``."""
    batch = _as_batch(model, pairs)
    return float(np.mean(np.logaddexp(0.0, -_gaps(model, batch))))


def bt_grad(model: PrmuModel, pairs) -> PrmuGrad:
    batch = _as_batch(model, pairs)
    coef = -sigmoid(-_gaps(model, batch)) / len(batch)
    diff = batch.pos - batch.neg
    rows = coef[:, None] * diff
    users: dict[str, np.ndarray] = {}
    for u, row in zip(batch.user_ids, rows):
        users[u] = users[u] + row if u in users else row.copy()
    # the bias cancels inside every score difference
    return PrmuGrad(w=rows.sum(axis=0), b=0.0, users=users)


def pairwise_accuracy(model: PrmuModel, pairs) -> float:
    """Fraction of pairs ranked correctly; exact ties count one half."""
    gaps = _gaps(model, _as_batch(model, pairs))
    return float(np.mean(np.where(gaps > 0, 1.0, np.where(gaps == 0, 0.5, 0.0))))


@dataclass(frozen=True)
class PrmuTrainConfig:
    lr: float = 1.0
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0


def train_prmu(model: PrmuModel, pairs, cfg: PrmuTrainConfig = PrmuTrainConfig()) -> tuple[PrmuModel, list[float]]:
    """Mini-batch gradient descent; returns a new model and per-epoch mean losses."""
    model = model.copy()
    batch = _as_batch(model, pairs)
    if len(batch) == 0:
        raise ValueError("empty preference dataset")
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(batch))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            mb = batch.subset(order[start:start + cfg.batch_size])
            epoch_losses.append(bt_loss(model, mb))
            g = bt_grad(model, mb)
            model.w = model.w - cfg.lr * g.w
            model.b = model.b - cfg.lr * g.b
            for u, gu in g.users.items():
                model.users[u] = model.embedding(u) - cfg.lr * gu
        losses.append(float(np.mean(epoch_losses)))
    return model, losses


# -- preference dataset construction ----------------------------------------

Responder = Callable[..., tuple[str, str]]


class NoisyResponder:
    """Oracle responder whose profile-conditioned answer is corrupted with probability ``noise``."""

    def __init__(self, env, noise: float = 0.5, registry=None):
        self.env = env
        self.noise = noise
        self.registry = registry

    def __call__(self, task, with_profile: bool, rng: np.random.Generator) -> tuple[str, str]:
        chain, answer = self.env.oracle_responder(task, with_profile=with_profile, registry=self.registry)
        if not with_profile or rng.random() >= self.noise:
            return chain, answer
        cfg = self.env.config
        if task.kind == "classification":
            answer = f"label_{int(rng.integers(cfg.n_classes))}"
        else:
            toks = answer.split()
            for i in rng.choice(len(toks), size=2, replace=False):
                toks[i] = f"w{int(rng.integers(cfg.n_content))}"
            answer = " ".join(toks)
        return chain, answer


def oracle_generator(env, registry=None) -> Responder:
    def _gen(task, with_profile: bool, rng: np.random.Generator) -> tuple[str, str]:
        return env.oracle_responder(task, with_profile=with_profile, registry=registry)
    return _gen


def build_prp_dataset(env, generator: Responder, n: int, seed: int = 0,
                      max_attempts: int | None = None) -> list[PreferencePair]:
    """Profile-visible responses preferred over profile-blind ones."""
    pairs: list[PreferencePair] = []
    max_attempts = max_attempts if max_attempts is not None else 20 * n + 20
    attempt = 0
    while len(pairs) < n and attempt < max_attempts:
        rng = np.random.default_rng([seed, 11, attempt])
        task = env.tasks(1, seed=int(rng.integers(2**31)), prefix="prp")[0]
        attempt += 1
        good = generator(task, True, rng)
        bad = generator(task, False, rng)
        if good == bad:
            continue
        pairs.append(PreferencePair(task.user_id, task.query, tuple(task.profile_pairs()),
                                    tuple(good), tuple(bad), "PRP"))
    return pairs


def response_quality(kind: str, answer: str, gold: str) -> float:
    if kind == "classification":
        return 1.0 if answer.strip().lower() == gold.strip().lower() else 0.0
    return rouge1(answer, gold)


def make_pqp_pair(task, candidates: Sequence[tuple[str, str]]) -> PreferencePair | None:
    """Best vs worst candidate by correctness/ROUGE-1; ``None`` on a tie."""
    scored = [(response_quality(task.kind, ans, task.gold), i) for i, (_, ans) in enumerate(candidates)]
    best = max(scored, key=lambda s: (s[0], -s[1]))
    worst = min(scored, key=lambda s: (s[0], s[1]))
    if best[0] <= worst[0]:
        return None
    good, bad = candidates[best[1]], candidates[worst[1]]
    if tuple(good) == tuple(bad):
        return None
    return PreferencePair(task.user_id, task.query, tuple(task.profile_pairs()),
                          tuple(good), tuple(bad), "PQP")


def build_pqp_dataset(env, generator: Responder, n: int, seed: int = 0, n_candidates: int = 2,
                      max_attempts: int | None = None) -> list[PreferencePair]:
    if n_candidates < 2:
        raise ValueError("need at least two candidates per prompt")
    pairs: list[PreferencePair] = []
    max_attempts = max_attempts if max_attempts is not None else 20 * n + 20
    attempt = 0
    while len(pairs) < n and attempt < max_attempts:
        rng = np.random.default_rng([seed, 12, attempt])
        task = env.tasks(1, seed=int(rng.integers(2**31)), prefix="pqp")[0]
        attempt += 1
        pair = make_pqp_pair(task, [generator(task, True, rng) for _ in range(n_candidates)])
        if pair is not None:
            pairs.append(pair)
    return pairs


def save_pairs(pairs: Sequence[PreferencePair], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in pairs))


def load_pairs(path: str | Path) -> list[PreferencePair]:
    return [PreferencePair.from_dict(json.loads(line))
            for line in Path(path).read_text().splitlines() if line.strip()]



def opposite_users_pairs(n: int, seed: int = 0, users: tuple[str, str] = ("user_a", "user_b"),
                         vocab_size: int = 40, dim: int = DEFAULT_DIM, margin: float = 0.05,
                         direction_seed: int = 0) -> list[PreferencePair]:
    """Two users with mirrored tastes over the same candidate pairs.

    A hidden direction ``v`` in feature space scores each response; the first
    user prefers the higher-scoring candidate and the second the lower one, so
    the preferences are linearly separable through the user embeddings. Pairs
    whose score gap is within ``margin`` are skipped. Returns ``2 * n`` pairs
    with the two users' versions of each sample adjacent. ``direction_seed``
    fixes the tastes and ``seed`` the sampled pairs, so a held-out set only
    needs a different ``seed``.
    """
    words = [f"t{j}" for j in range(vocab_size)]
    v = np.zeros(dim)
    for w, weight in zip(words, np.random.default_rng([direction_seed, 14]).normal(size=vocab_size)):
        v[_bucket(f"a:{w}", dim)] += weight
    rng = np.random.default_rng([seed, 13])
    pairs: list[PreferencePair] = []
    while len(pairs) < 2 * n:
        query = " ".join(rng.choice(words, size=3))
        cands = [("", " ".join(rng.choice(words, size=int(rng.integers(2, 6))))) for _ in range(2)]
        phis = [featurize(PrmuInput(users[0], query, (), *c), dim) for c in cands]
        gap = float(v @ (phis[0] - phis[1]))
        if abs(gap) <= margin or cands[0] == cands[1]:
            continue
        hi, lo = (cands[0], cands[1]) if gap > 0 else (cands[1], cands[0])
        pairs.append(PreferencePair(users[0], query, (), hi, lo, "synthetic"))
        pairs.append(PreferencePair(users[1], query, (), lo, hi, "synthetic"))
    return pairs
