"""A log-linear autoregressive policy over a small symbol vocabulary.

The next-symbol distribution is ``softmax(theta @ phi)`` where ``phi`` stacks
one-hot codes of the previous ``window`` symbols and a fixed vector of prompt
features (query item, profile label statistics, profile symbol bag, task kind).
The prompt block is replicated per slot type (structure, tag body, answer),
chosen by the previous symbol, so what the prompt says about the answer does
not leak into the markup decisions. Everything here is plain numpy; gradients
are exact.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import EnvConfig, TaskInstance, content_symbol, label_symbol
from .rewards import THINK_CLOSE, THINK_OPEN
from .tags import TagRegistry

log = logging.getLogger(__name__)

END = "<end>"
CHECKPOINT_VERSION = 1

SLOT_STRUCTURE, SLOT_BODY, SLOT_ANSWER = 0, 1, 2
N_SLOTS = 3
_OPEN_RE = re.compile(r"<[a-z_]+>")


@dataclass(frozen=True)
class Vocab:
    symbols: tuple[str, ...]
    think_open: str | None = None
    think_close: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})
        if len(self._index) != len(self.symbols):
            raise ValueError("duplicate vocabulary symbols")
        if END not in self._index:
            raise ValueError(f"vocabulary must contain {END}")
        slots = [SLOT_STRUCTURE] * (len(self.symbols) + 1)  # last entry: bos
        for i, sym in enumerate(self.symbols):
            if sym == self.think_close:
                slots[i] = SLOT_ANSWER
            elif _OPEN_RE.fullmatch(sym) and sym not in (self.think_open, END):
                slots[i] = SLOT_BODY
        object.__setattr__(self, "slot_of", np.asarray(slots, dtype=int))

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def end(self) -> int:
        return self._index[END]

    @property
    def bos(self) -> int:
        # context-only padding id, never emitted
        return len(self.symbols)

    def encode(self, symbols: Sequence[str]) -> list[int]:
        try:
            return [self._index[s] for s in symbols]
        except KeyError as exc:
            raise ValueError(f"out-of-vocabulary symbol {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.symbols[i] for i in ids]

    @classmethod
    def build(cls, registry: TagRegistry, n_classes: int, n_content: int,
              think_open: str = THINK_OPEN, think_close: str = THINK_CLOSE) -> "Vocab":
        syms = [think_open, think_close]
        for t in registry.names:
            syms += [f"<{t}>", f"</{t}>"]
        syms += [content_symbol(i) for i in range(n_content)]
        syms += [label_symbol(c) for c in range(n_classes)]
        syms.append(END)
        return cls(tuple(syms), think_open, think_close)


@dataclass(frozen=True)
class PromptEncoder:
    """Fixed prompt features for a task instance."""

    n_classes: int
    n_content: int
    item_dim: int

    @classmethod
    def for_env(cls, cfg: EnvConfig) -> "PromptEncoder":
        return cls(cfg.n_classes, cfg.n_content, cfg.item_dim)

    @property
    def dim(self) -> int:
        return self.item_dim + 2 * self.n_classes + self.n_content + 2

    def __call__(self, task: TaskInstance) -> np.ndarray:
        K, N = self.n_classes, self.n_content
        hist = np.zeros(K)
        bag = np.zeros(N)
        n_tok = 0
        for p in task.profile:
            for tok in p.response.split():
                if tok.startswith("label_"):
                    c = int(tok[6:])
                    if c < K:
                        hist[c] += 1
                elif tok.startswith("w"):
                    i = int(tok[1:])
                    if i < N:
                        bag[i] += 1
                n_tok += 1
        k = max(len(task.profile), 1)
        log_hist = np.log((hist + 0.5) / (k + 0.5 * K))
        kind = [1.0, 0.0] if task.kind == "classification" else [0.0, 1.0]
        return np.concatenate([np.asarray(task.item, dtype=float), hist / k, log_hist,
                               bag / max(n_tok, 1), kind])

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes, "n_content": self.n_content, "item_dim": self.item_dim}


@dataclass
class PolicyParams:
    vocab: Vocab
    prompt_dim: int
    window: int = 2
    theta: np.ndarray | None = None

    def __post_init__(self):
        if self.theta is None:
            self.theta = np.zeros((len(self.vocab), self.context_dim))
        if self.theta.shape != (len(self.vocab), self.context_dim):
            raise ValueError(f"theta shape {self.theta.shape} != {(len(self.vocab), self.context_dim)}")

    @property
    def context_dim(self) -> int:
        return self.prompt_offset + N_SLOTS * self.prompt_dim

    @property
    def prompt_offset(self) -> int:
        return self.window * (len(self.vocab) + 1)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.vocab, self.prompt_dim, self.window, self.theta.copy())

    def with_theta(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(self.vocab, self.prompt_dim, self.window, theta)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))

    def save(self, path: str | Path, encoder: PromptEncoder | None = None, meta: dict | None = None) -> None:
        payload = {
            "version": CHECKPOINT_VERSION, "kind": "policy", "vocab": list(self.vocab.symbols),
            "think_markers": [self.vocab.think_open, self.vocab.think_close],
            "window": self.window, "prompt_dim": self.prompt_dim, "theta": self.theta.tolist(),
            "encoder": encoder.to_dict() if encoder else None, "meta": meta or {},
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> tuple["PolicyParams", PromptEncoder | None, dict]:
        d = json.loads(Path(path).read_text())
        if d.get("kind") != "policy" or d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} policy checkpoint")
        params = cls(Vocab(tuple(d["vocab"]), *d.get("think_markers", (None, None))), d["prompt_dim"], d["window"],
                     np.asarray(d["theta"], dtype=float))
        enc = PromptEncoder(**d["encoder"]) if d.get("encoder") else None
        return params, enc, d.get("meta", {})


def _window_ids(params: PolicyParams, prefix: Sequence[int]) -> list[int]:
    """Column index of each window slot (most recent first)."""
    V1 = len(params.vocab) + 1
    cols = []
    for j in range(params.window):
        sym = prefix[-1 - j] if len(prefix) > j else params.vocab.bos
        cols.append(j * V1 + sym)
    return cols


def _slot(params: PolicyParams, prefix: Sequence[int]) -> int:
    return int(params.vocab.slot_of[prefix[-1] if len(prefix) else params.vocab.bos])


def context_features(params: PolicyParams, prefix: Sequence[int], prompt: np.ndarray) -> np.ndarray:
    """Dense feature vector for the next-symbol decision after ``prefix``."""
    phi = np.zeros(params.context_dim)
    phi[_window_ids(params, prefix)] = 1.0
    start = params.prompt_offset + _slot(params, prefix) * params.prompt_dim
    phi[start:start + params.prompt_dim] = prompt
    return phi


def _sequence_columns(params: PolicyParams, ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """(T, window) window columns and (T,) slot types for every position of ``ids``."""
    V1 = len(params.vocab) + 1
    padded = [params.vocab.bos] * params.window + list(ids)
    T = len(ids)
    cols = np.empty((T, params.window), dtype=int)
    for j in range(params.window):
        cols[:, j] = j * V1 + np.asarray(padded[params.window - 1 - j:params.window - 1 - j + T], dtype=int)
    slots = params.vocab.slot_of[np.asarray(padded[params.window - 1:params.window - 1 + T], dtype=int)]
    return cols, slots


def _prompt_logits(params: PolicyParams, prompt: np.ndarray) -> np.ndarray:
    """(V, N_SLOTS) prompt contribution to the logits for each slot type."""
    V, P = len(params.vocab), params.prompt_dim
    return params.theta[:, params.prompt_offset:].reshape(V, N_SLOTS, P) @ prompt


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def sequence_logits(params: PolicyParams, ids: Sequence[int], prompt: np.ndarray) -> np.ndarray:
    cols, slots = _sequence_columns(params, ids)
    return params.theta[:, cols].sum(axis=2).T + _prompt_logits(params, prompt)[:, slots].T


def sequence_logprob(params: PolicyParams, ids: Sequence[int], prompt: np.ndarray,
                     temperature: float = 1.0) -> float:
    """Sum of per-symbol log-probabilities of ``ids``."""
    if len(ids) == 0:
        return 0.0
    lsm = _log_softmax(sequence_logits(params, ids, prompt) / temperature)
    return float(lsm[np.arange(len(ids)), ids].sum())


def logprob_and_grad(params: PolicyParams, ids: Sequence[int], prompt: np.ndarray,
                     temperature: float = 1.0) -> tuple[float, np.ndarray]:
    """Sequence log-probability and its gradient with respect to ``theta``."""
    grad = np.zeros_like(params.theta)
    if len(ids) == 0:
        return 0.0, grad
    ids = np.asarray(ids, dtype=int)
    cols, slots = _sequence_columns(params, ids)
    lsm = _log_softmax(sequence_logits(params, ids, prompt) / temperature)
    T = len(ids)
    delta = -np.exp(lsm)
    delta[np.arange(T), ids] += 1.0
    delta /= temperature
    for j in range(params.window):
        np.add.at(grad.T, cols[:, j], delta)
    per_slot = np.zeros((N_SLOTS, len(params.vocab)))
    np.add.at(per_slot, slots, delta)
    P = params.prompt_dim
    for k in range(N_SLOTS):
        start = params.prompt_offset + k * P
        grad[:, start:start + P] = np.outer(per_slot[k], prompt)
    return float(lsm[np.arange(T), ids].sum()), grad


@dataclass
class Rollout:
    tokens: tuple[int, ...]
    logprob_old: float
    rendered_text: str
    reward: float = float("nan")

    def __len__(self) -> int:
        return len(self.tokens)


def render(vocab: Vocab, ids: Sequence[int]) -> str:
    return " ".join(vocab.symbols[i] for i in ids if i != vocab.end)


def _top_p_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    keep = order[:int(np.searchsorted(csum, top_p) + 1)]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def sample_sequence(params: PolicyParams, prompt: np.ndarray, rng: np.random.Generator | None,
                    temperature: float = 1.0, top_p: float = 1.0, max_len: int = 32) -> Rollout:
    """Autoregressive sampling; ``temperature <= 0`` means argmax decoding.

    ``logprob_old`` is measured under the tempered, untruncated distribution
    (the plain distribution when decoding greedily).
    """
    if top_p < 1.0:
        log.warning("top_p=%s < 1: stored log-likelihoods ignore the truncation", top_p)
    ids: list[int] = []
    total = 0.0
    p_logits = _prompt_logits(params, prompt)
    greedy = temperature <= 0
    T = 1.0 if greedy else temperature
    while len(ids) < max_len:
        z = params.theta[:, _window_ids(params, ids)].sum(axis=1) + p_logits[:, _slot(params, ids)]
        lsm = _log_softmax(z / T)
        if greedy:
            nxt = int(np.argmax(lsm))
        else:
            probs = np.exp(lsm)
            if top_p < 1.0:
                probs = _top_p_filter(probs, top_p)
            nxt = int(rng.choice(len(probs), p=probs / probs.sum()))
        total += float(lsm[nxt])
        ids.append(nxt)
        if nxt == params.vocab.end:
            break
    return Rollout(tuple(ids), total, render(params.vocab, ids))


# -- supervised fine-tuning --------------------------------------------------

def target_symbols(chain: str, answer: str, think_open: str = THINK_OPEN,
                   think_close: str = THINK_CLOSE) -> list[str]:
    return [think_open, *chain.split(), think_close, *answer.split(), END]


def sft_loss_and_grad(params: PolicyParams, batch: Sequence[tuple[np.ndarray, Sequence[int]]]) -> tuple[float, np.ndarray]:
    """Mean sequence negative log-likelihood and its gradient."""
    if not batch:
        raise ValueError("empty SFT batch")
    loss = 0.0
    grad = np.zeros_like(params.theta)
    for prompt, ids in batch:
        lp, g = logprob_and_grad(params, ids, prompt)
        loss -= lp
        grad -= g
    return loss / len(batch), grad / len(batch)


def sft_step(params: PolicyParams, batch: Sequence[tuple[np.ndarray, Sequence[str] | Sequence[int]]],
             lr: float) -> tuple[PolicyParams, float]:
    """One gradient-descent step on the mean NLL; targets may be symbols or ids."""
    encoded = []
    for prompt, target in batch:
        if target and isinstance(target[0], str):
            target = params.vocab.encode(target)
        encoded.append((prompt, target))
    loss, grad = sft_loss_and_grad(params, encoded)
    return params.with_theta(params.theta - lr * grad), loss


@dataclass(frozen=True)
class SftConfig:
    lr: float = 1e-5
    epochs: int = 2
    batch_size: int = 64
    seed: int = 0


def train_sft(params: PolicyParams, examples: Sequence[tuple[np.ndarray, Sequence[str]]],
              cfg: SftConfig = SftConfig()) -> tuple[PolicyParams, list[float]]:
    """Epochs of shuffled mini-batch SFT; returns params and per-step losses."""
    data = [(p, params.vocab.encode(t)) for p, t in examples]
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(order), cfg.batch_size):
            params, loss = sft_step(params, [data[i] for i in order[start:start + cfg.batch_size]], cfg.lr)
            if not params.is_finite():
                raise FloatingPointError("non-finite policy parameters during SFT")
            losses.append(loss)
    return params, losses


def new_policy(registry: TagRegistry, env_cfg: EnvConfig, window: int = 2,
               think_open: str = THINK_OPEN, think_close: str = THINK_CLOSE) -> tuple[PolicyParams, PromptEncoder]:
    vocab = Vocab.build(registry, env_cfg.n_classes, env_cfg.n_content, think_open, think_close)
    enc = PromptEncoder.for_env(env_cfg)
    return PolicyParams(vocab, enc.dim, window), enc
