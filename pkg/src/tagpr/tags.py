"""Tagged reasoning chains: parsing, structural validation and tag statistics.

A chain is free text interleaved with flat ``<name>body</name>`` regions.
Anything shaped like a marker (``<[a-z_]+>`` or ``</[a-z_]+>``) is treated as
markup; every other angle bracket is literal text.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

DEFAULT_TAGS = (
    "analyze_input",
    "examine_examples",
    "identify_patterns",
    "compare_entities",
    "make_decision",
)
DEFAULT_MIN_TAG_COUNT = 3

_NAME_RE = re.compile(r"[a-z_]+")
_MARKER_RE = re.compile(r"<(/?)([a-z_]+)>")

VIOLATION_KINDS = (
    "unclosed_tag",
    "stray_close",
    "unknown_tag",
    "nested_tag",
    "below_min_count",
    "empty_body",
)


@dataclass(frozen=True)
class TagRegistry:
    names: tuple[str, ...] = DEFAULT_TAGS
    min_tag_count: int = DEFAULT_MIN_TAG_COUNT

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ValueError("registry needs at least one tag name")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate tag names in {names}")
        for name in names:
            if not _NAME_RE.fullmatch(name):
                raise ValueError(f"invalid tag name {name!r}: expected [a-z_]+")
        if self.min_tag_count < 1:
            raise ValueError("min_tag_count must be >= 1")

    def __contains__(self, name: str) -> bool:
        return name in self.names

    @classmethod
    def from_dict(cls, data: dict) -> "TagRegistry":
        unknown = set(data) - {"names", "min_tag_count"}
        if unknown:
            raise ValueError(f"unknown registry keys: {sorted(unknown)}")
        return cls(
            names=tuple(data.get("names", DEFAULT_TAGS)),
            min_tag_count=int(data.get("min_tag_count", DEFAULT_MIN_TAG_COUNT)),
        )

    def to_dict(self) -> dict:
        return {"names": list(self.names), "min_tag_count": self.min_tag_count}


@dataclass(frozen=True)
class TagSpan:
    """One well-formed region; ``start``/``end`` cover the markers, ``body`` does not."""

    name: str
    start: int
    end: int
    body: str


@dataclass(frozen=True)
class Marker:
    name: str
    start: int
    end: int
    closing: bool


@dataclass(frozen=True)
class Issue:
    kind: str
    detail: str


@dataclass(frozen=True)
class TaggedChain:
    raw: str
    spans: tuple[TagSpan, ...] = ()
    answer: str = ""
    markers: tuple[Marker, ...] = ()
    issues: tuple[Issue, ...] = ()

    def segments(self) -> list[str]:
        """Inter-span text and span text alternating; joins back to ``raw``."""
        out = []
        pos = 0
        for span in self.spans:
            out.append(self.raw[pos:span.start])
            out.append(self.raw[span.start:span.end])
            pos = span.end
        out.append(self.raw[pos:])
        return out

    @property
    def tag_names(self) -> list[str]:
        return [s.name for s in self.spans]


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Issue, ...] = field(default_factory=tuple)

    @property
    def passes(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}


def parse_chain(raw: str) -> TaggedChain:
    """Parse ``raw`` into spans; never raises on malformed markup.

    Structural problems (unclosed, stray or nested markers) are recorded on the
    returned chain and surface later through :func:`validate`.
    """
    markers = tuple(
        Marker(m.group(2), m.start(), m.end(), m.group(1) == "/")
        for m in _MARKER_RE.finditer(raw)
    )
    spans: list[TagSpan] = []
    issues: list[Issue] = []
    # stack entries: [marker, has_child]
    stack: list[list] = []
    for mk in markers:
        if not mk.closing:
            if stack:
                stack[-1][1] = True
                issues.append(Issue(
                    "nested_tag",
                    f"<{mk.name}> at {mk.start} opened inside <{stack[-1][0].name}>",
                ))
            stack.append([mk, False])
            continue
        open_names = [entry[0].name for entry in stack]
        if mk.name not in open_names:
            issues.append(Issue("stray_close", f"</{mk.name}> at {mk.start} has no opener"))
            continue
        while stack[-1][0].name != mk.name:
            dangling = stack.pop()[0]
            issues.append(Issue("unclosed_tag", f"<{dangling.name}> at {dangling.start} never closed"))
        opener, has_child = stack.pop()
        if not has_child:
            spans.append(TagSpan(mk.name, opener.start, mk.end, raw[opener.end:mk.start]))
    for opener, _ in stack:
        issues.append(Issue("unclosed_tag", f"<{opener.name}> at {opener.start} never closed"))

    closes = [mk for mk in markers if mk.closing]
    answer = raw[closes[-1].end:].strip() if closes else raw.strip()
    spans.sort(key=lambda s: s.start)
    return TaggedChain(raw=raw, spans=tuple(spans), answer=answer, markers=markers, issues=tuple(issues))


def validate(chain: TaggedChain, registry: TagRegistry) -> ValidationReport:
    violations = list(chain.issues)
    for name in sorted({mk.name for mk in chain.markers} - set(registry.names)):
        violations.append(Issue("unknown_tag", f"<{name}> is not a registered tag"))
    for span in chain.spans:
        if not span.body.strip():
            violations.append(Issue("empty_body", f"<{span.name}> at {span.start} has an empty body"))
    if len(chain.spans) < registry.min_tag_count:
        violations.append(Issue(
            "below_min_count",
            f"{len(chain.spans)} tag spans, at least {registry.min_tag_count} required",
        ))
    return ValidationReport(tuple(violations))


def tag_histogram(chains: Iterable[TaggedChain]) -> dict[str, float]:
    counts: Counter[str] = Counter()
    for chain in chains:
        counts.update(chain.tag_names)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {name: n / total for name, n in sorted(counts.items())}


def render_chain(steps: Iterable[tuple[str | None, str]]) -> str:
    """Join ``(tag, text)`` steps into markup; untagged steps stay free text."""
    parts = []
    for tag, text in steps:
        parts.append(text if tag is None else f"<{tag}>{text}</{tag}>")
    return "".join(parts)
