"""Tokenization, n-gram statistics, ROUGE and label metrics."""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0xF900 <= cp <= 0xFAFF
        or 0x3040 <= cp <= 0x30FF  # kana
        or 0xAC00 <= cp <= 0xD7AF  # hangul syllables
    )


def _is_word_char(ch: str) -> bool:
    # letters, marks and numbers; whitespace, punctuation (incl. "_") and symbols split
    return unicodedata.category(ch)[0] in "LMN"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation; CJK characters stand alone.

    >>> tokenize("The cat, sat.")
    ['the', 'cat', 'sat']
    """
    tokens: list[str] = []
    buf: list[str] = []
    for ch in text.lower():
        if _is_cjk(ch):
            if buf:
                tokens.append("".join(buf))
                buf = []
            tokens.append(ch)
        elif _is_word_char(ch):
            buf.append(ch)
        elif buf:
            tokens.append("".join(buf))
            buf = []
    if buf:
        tokens.append("".join(buf))
    return tokens


@dataclass(frozen=True)
class NGramStats:
    n: int
    total: int
    unique: int


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    if n <= 0:
        raise ValueError(f"n must be >= 1, got {n}")
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def ngram_stats(tokens: Sequence[str], n: int) -> NGramStats:
    grams = ngrams(tokens, n)
    return NGramStats(n=n, total=len(grams), unique=len(set(grams)))


def _f1(overlap: float, n_cand: int, n_ref: int) -> float:
    if n_cand == 0 or n_ref == 0 or overlap == 0:
        return 0.0
    p = overlap / n_cand
    r = overlap / n_ref
    return 2 * p * r / (p + r)


def rouge1(candidate: str, reference: str) -> float:
    """Unigram F1 with clipped multiset overlap."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    overlap = sum((Counter(cand) & Counter(ref)).values())
    return _f1(overlap, len(cand), len(ref))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rougeL(candidate: str, reference: str) -> float:
    """LCS-based F1."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    return _f1(lcs_length(cand, ref), len(cand), len(ref))


def _as_number(value) -> float | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(str(value).strip())
    except ValueError:
        return None


def classification_metrics(preds: Sequence, golds: Sequence) -> dict[str, float | None]:
    """Accuracy, macro-F1, and MAE/RMSE when every label is numeric (else ``None``).

    Macro-F1 averages per-class F1 over the union of predicted and gold classes.
    """
    if len(preds) != len(golds):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise ValueError("need at least one prediction")
    n = len(golds)
    accuracy = sum(p == g for p, g in zip(preds, golds)) / n

    f1s = []
    for c in sorted(set(preds) | set(golds), key=str):
        tp = sum(p == c and g == c for p, g in zip(preds, golds))
        fp = sum(p == c and g != c for p, g in zip(preds, golds))
        fn = sum(p != c and g == c for p, g in zip(preds, golds))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    macro_f1 = sum(f1s) / len(f1s)

    pn = [_as_number(p) for p in preds]
    gn = [_as_number(g) for g in golds]
    if any(v is None for v in pn + gn):
        mae = rmse = None
    else:
        errs = [p - g for p, g in zip(pn, gn)]
        mae = sum(abs(e) for e in errs) / n
        rmse = math.sqrt(sum(e * e for e in errs) / n)
    return {"accuracy": accuracy, "macro_f1": macro_f1, "mae": mae, "rmse": rmse}
