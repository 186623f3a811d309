"""Text-completion clients used by the data pipeline.

All clients share one call, ``complete(prompt, n, temperature) -> list[str]``.
The HTTP client speaks a small JSON protocol::

    POST <endpoint>  {"prompt": ..., "n": ..., "temperature": ..., "seed": ...}
    200              {"texts": [...]}

The mock clients are pure functions of ``(prompt, n, seed)`` so pipeline runs
can be replayed byte for byte offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
import urllib.error
import urllib.request
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

ENDPOINT_ENV = "TAGPR_ENDPOINT"
API_KEY_ENV = "TAGPR_API_KEY"


class ClientError(RuntimeError):
    pass


class GenerationClient(Protocol):
    def complete(self, prompt: str, n: int = 1, temperature: float = 1.0) -> list[str]: ...


def _stable_rng(*parts) -> np.random.Generator:
    digest = hashlib.blake2b(json.dumps(parts, sort_keys=True).encode(), digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


class HttpGenerationClient:
    def __init__(self, endpoint: str | None = None, api_key: str | None = None,
                 timeout: float = 60.0, seed: int | None = None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ClientError(f"no endpoint configured; set {ENDPOINT_ENV}")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.timeout = timeout
        self.seed = seed

    def complete(self, prompt: str, n: int = 1, temperature: float = 1.0) -> list[str]:
        body = {"prompt": prompt, "n": n, "temperature": temperature}
        if self.seed is not None:
            body["seed"] = self.seed
        req = urllib.request.Request(self.endpoint, data=json.dumps(body).encode(), method="POST",
                                     headers={"Content-Type": "application/json"})
        if self.api_key:
            req.add_header("Authorization", f"Bearer {self.api_key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
            raise ClientError(f"request to {self.endpoint} failed: {exc}") from exc
        texts = payload.get("texts") if isinstance(payload, dict) else None
        if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
            raise ClientError("response lacks a 'texts' list of strings")
        return texts


def complete_with_retry(client: GenerationClient, prompt: str, n: int, temperature: float = 1.0,
                        attempts: int = 3, backoff: float = 0.5, sleep=time.sleep) -> list[str]:
    """Call ``client`` until it returns exactly ``n`` texts; exponential backoff between tries."""
    last: Exception | None = None
    for attempt in range(attempts):
        try:
            texts = client.complete(prompt, n, temperature)
            if len(texts) != n:
                raise ClientError(f"expected {n} texts, got {len(texts)}")
            return texts
        except ClientError as exc:
            last = exc
            log.warning("client call failed (attempt %d/%d): %s", attempt + 1, attempts, exc)
            if attempt + 1 < attempts:
                sleep(backoff * 2 ** attempt)
    raise ClientError(f"giving up after {attempts} attempts: {last}")


# -- prompt payloads -----------------------------------------------------------
# Prompts end with a JSON payload line so mocks (and humans) can read the inputs.

PAYLOAD_MARK = "\nINPUT: "


def with_payload(instructions: str, payload: dict) -> str:
    return instructions + PAYLOAD_MARK + json.dumps(payload, sort_keys=True)


def read_payload(prompt: str) -> dict:
    i = prompt.rfind(PAYLOAD_MARK)
    if i < 0:
        raise ClientError("prompt carries no input payload")
    return json.loads(prompt[i + len(PAYLOAD_MARK):])


# Step phrase bank: semantic group -> sentences a reasoning model might write.
STEP_BANK: dict[str, tuple[str, ...]] = {
    "input": ("Read the query item and its features.", "Look closely at what the query asks for.",
              "Parse the new item to be handled."),
    "examples": ("Go through the user's past items one by one.", "Review the history of previous answers.",
                 "Check the earlier examples from this user."),
    "patterns": ("Notice which label keeps recurring.", "Spot the regularity in the user's choices.",
                 "Find the recurring preference."),
    "compare": ("Weigh the query against the most similar past item.", "Contrast the candidate answers.",
                "Compare the new item with earlier ones."),
    "decision": ("Settle on the final answer.", "Choose the answer that fits the user.",
                 "Commit to a decision."),
    "recall": ("Recall what this user tends to prefer.", "Remember the user's typical taste."),
    "verify": ("Double-check the answer against the history.", "Verify the choice is consistent."),
    "summarize": ("Summarize the evidence so far.", "Condense the observations."),
    "style": ("Match the user's usual wording.", "Adopt the user's writing style."),
}

# Free-form tag variants the exploratory tagger may emit for each group.
TAG_VARIANTS: dict[str, tuple[str, ...]] = {
    "input": ("Analyze Input", "analyze input", "analyse input", "analyze_input", "input analysis"),
    "examples": ("Examine Examples", "examine examples", "examine_example", "review examples"),
    "patterns": ("Identify Patterns", "identify patterns", "identify pattern", "pattern identification"),
    "compare": ("Compare Entities", "compare entities", "compare entity", "entity comparison"),
    "decision": ("Make Decision", "make decision", "make_decisions", "decision making"),
    "recall": ("Recall Preferences", "recall preferences", "recall preference"),
    "verify": ("Verify Consistency", "verify consistency", "verify consistent"),
    "summarize": ("Summarize Evidence", "summarize evidence", "summarise evidence"),
    "style": ("Match Style", "match style", "match styles"),
}

_STEP_GROUP = {s: g for g, steps in STEP_BANK.items() for s in steps}
_EXTRA = ("recall", "verify", "summarize", "style")


def step_group(step: str) -> str | None:
    return _STEP_GROUP.get(step.strip())


class MockGenerator:
    """Reasoning-model stand-in: ``<think>`` steps one per line, then an answer.

    ``answer_key`` maps task ids to ``{"gold": ..., "distractors": [...]}``;
    the gold answer comes out with probability ``p_correct``.
    """

    def __init__(self, answer_key: dict[str, dict], seed: int = 0, p_correct: float = 0.6):
        self.answer_key = answer_key
        self.seed = seed
        self.p_correct = p_correct

    def complete(self, prompt: str, n: int = 1, temperature: float = 1.0) -> list[str]:
        key = self.answer_key[read_payload(prompt)["task_id"]]
        distractors = key.get("distractors") or ["unknown"]
        out = []
        for i in range(n):
            rng = _stable_rng("gen", self.seed, prompt, i)
            groups = ["input", "examples"]
            groups += [g for g in ("patterns", "compare") if rng.random() < 0.5]
            groups += [g for g in _EXTRA if rng.random() < 0.15]
            groups.append("decision")
            if rng.random() < 0.2:
                groups = groups[1:]
            steps = [STEP_BANK[g][int(rng.integers(len(STEP_BANK[g])))] for g in groups]
            answer = key["gold"] if rng.random() < self.p_correct \
                else distractors[int(rng.integers(len(distractors)))]
            out.append("<think>" + "\n".join(steps) + "</think>" + answer)
        return out


class MockJudge:
    """Scores four criteria 0-5 as a JSON object; ``malformed_rate`` of replies are garbage."""

    def __init__(self, seed: int = 0, malformed_rate: float = 0.02):
        self.seed = seed
        self.malformed_rate = malformed_rate

    def complete(self, prompt: str, n: int = 1, temperature: float = 0.0) -> list[str]:
        out = []
        for i in range(n):
            rng = _stable_rng("judge", self.seed, prompt, i)
            if rng.random() < self.malformed_rate:
                out.append("I think this chain is pretty good overall.")
                continue
            scores = rng.integers(2, 6, size=4)
            out.append(json.dumps({
                "logical_consistency": int(scores[0]), "factual_accuracy": int(scores[1]),
                "completeness": int(scores[2]), "conciseness": int(scores[3]),
            }))
        return out


class MockTagger:
    """Tags each reasoning step.

    In exploratory mode (no ``registry`` in the payload) it returns a free-form
    variant of the step's semantic group. In restricted mode it picks the
    registry tag closest to the group's canonical phrase, and with probability
    ``off_registry_rate`` emits an unregistered tag instead.
    """

    def __init__(self, seed: int = 0, off_registry_rate: float = 0.03, embed=None):
        self.seed = seed
        self.off_registry_rate = off_registry_rate
        self._embed = embed

    def complete(self, prompt: str, n: int = 1, temperature: float = 0.0) -> list[str]:
        payload = read_payload(prompt)
        steps: Sequence[str] = payload["steps"]
        registry = payload.get("registry")
        out = []
        for i in range(n):
            tags = []
            for j, step in enumerate(steps):
                rng = _stable_rng("tag", self.seed, prompt, i, j)
                group = step_group(step) or "summarize"
                if registry is None:
                    variants = TAG_VARIANTS[group]
                    tags.append(variants[int(rng.integers(len(variants)))])
                elif rng.random() < self.off_registry_rate:
                    tags.append(f"{group}_step")
                else:
                    tags.append(self._closest(group, registry))
            out.append(json.dumps(tags))
        return out

    def _closest(self, group: str, registry: Sequence[str]) -> str:
        from .pipeline import embed_tags  # local: pipeline imports this module

        embed = self._embed or embed_tags
        target = embed([TAG_VARIANTS[group][1].replace(" ", "_")])[0]
        vecs = embed(list(registry))
        sims = vecs @ target
        return registry[int(np.argmax(sims))]
