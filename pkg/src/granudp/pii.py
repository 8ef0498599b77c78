"""Regex + gazetteer PII detection and the leakage percentage over MIA hits."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import ParallelUnit

CATEGORIES = ("PERSON", "ORG", "EMAIL", "URL", "PHONE", "ORDER_NUMBER")
LEAKAGE_LIMIT = 0.5

# Earlier entries win ties between equally long matches at the same offset.
_PATTERNS: tuple[tuple[str, re.Pattern], ...] = (
    ("EMAIL", re.compile(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}")),
    (
        "URL",
        re.compile(
            r"(?:https?://|www\.)[\w\-.~%/?=&#+:]*[\w/]"
            r"|(?<![\w@.])[\w-]+(?:\.[\w-]+)*\.(?:de|com|org|net|eu|uk|jp|io|info)\b(?:/[\w\-.~%/?=&#+]*[\w/])?"
        ),
    ),
    ("PHONE", re.compile(r"\+\d{1,3}(?:[ \-]?\(?\d{2,}\)?){2,}|(?<![\w+])0\d{2,4}[ /\-]\d{3,}(?:[ \-]\d{2,})*")),
    ("ORDER_NUMBER", re.compile(r"(?<![\w+])\d{3}(?:\d|\.|…)*")),
)


class PiiError(ValueError):
    pass


@dataclass(frozen=True)
class PiiSpan:
    category: str
    text: str
    start: int
    end: int

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise PiiError(f"unknown PII category {self.category!r}")
        if not 0 <= self.start < self.end:
            raise PiiError(f"invalid span [{self.start}, {self.end})")


def _gazetteer_pattern(values: Iterable[str]) -> re.Pattern | None:
    vals = sorted({v for v in values if v}, key=lambda v: (-len(v), v))
    if not vals:
        return None
    return re.compile(r"(?<!\w)(?:" + "|".join(map(re.escape, vals)) + r")(?!\w)")


class Detector:
    """Compiled detector; reuse it across many texts with the same gazetteer."""

    def __init__(self, gazetteer: Mapping[str, Iterable[str]] | None = None):
        gazetteer = gazetteer or {}
        unknown = set(gazetteer) - {"PERSON", "ORG"}
        if unknown:
            raise PiiError(f"gazetteer supports PERSON and ORG only, got {sorted(unknown)}")
        self.patterns: list[tuple[str, re.Pattern]] = []
        for cat in ("PERSON", "ORG"):
            pat = _gazetteer_pattern(gazetteer.get(cat, ()))
            if pat is not None:
                self.patterns.append((cat, pat))
        self.patterns.extend(_PATTERNS)
        self._rank = {cat: i for i, (cat, _) in enumerate(self.patterns)}

    def __call__(self, text: str) -> list[PiiSpan]:
        candidates = [
            (m.start(), -(m.end() - m.start()), self._rank[cat], cat, m.end())
            for cat, pat in self.patterns
            for m in pat.finditer(text)
            if m.end() > m.start()
        ]
        candidates.sort()
        spans: list[PiiSpan] = []
        cursor = 0
        for start, _, _, cat, end in candidates:
            if start < cursor:
                continue
            spans.append(PiiSpan(cat, text[start:end], start, end))
            cursor = end
        return spans


def detect(text: str, gazetteer: Mapping[str, Iterable[str]] | None = None) -> list[PiiSpan]:
    """Non-overlapping spans, left to right; the longest candidate wins at each offset."""
    return Detector(gazetteer)(text)


@dataclass(frozen=True)
class LeakageReport:
    detected_pii_count: int
    total_pii_count: int
    detected_unit_count: int
    total_unit_count: int

    CSV_FIELDS = ("run_id", "model_tag", "epsilon", "detected", "total", "leakage_pct", "verdict")

    @property
    def defined(self) -> bool:
        return self.total_pii_count > 0

    @property
    def leakage_fraction(self) -> float | None:
        if not self.defined:
            return None
        return self.detected_pii_count / self.total_pii_count

    @property
    def unit_leakage_fraction(self) -> float | None:
        if not self.total_unit_count:
            return None
        return self.detected_unit_count / self.total_unit_count

    def row(self, run_id: str, model_tag: str, epsilon: str) -> dict:
        frac = self.leakage_fraction
        return {
            "run_id": run_id,
            "model_tag": model_tag,
            "epsilon": epsilon,
            "detected": self.detected_pii_count,
            "total": self.total_pii_count,
            "leakage_pct": "" if frac is None else 100.0 * frac,
            "verdict": privacy_verdict(self) if self.defined else "undefined",
        }


def leakage_percentage(
    true_positive_units: Sequence[ParallelUnit],
    sampled_member_units: Sequence[ParallelUnit],
    gazetteer: Mapping[str, Iterable[str]] | None = None,
) -> LeakageReport:
    """Share of target-side PII spans of the sampled members that sit in MIA true positives.

    Unit-level counts (units with at least one span) are reported alongside.
    """
    member_ids = {u.unit_id for u in sampled_member_units}
    stray = [u.unit_id for u in true_positive_units if u.unit_id not in member_ids]
    if stray:
        raise PiiError(f"true positives outside the sampled members: {stray[:5]}")
    detector = Detector(gazetteer)
    counts = {u.unit_id: len(detector(u.tgt)) for u in sampled_member_units}
    tp_ids = {u.unit_id for u in true_positive_units}
    return LeakageReport(
        detected_pii_count=sum(counts[i] for i in tp_ids),
        total_pii_count=sum(counts.values()),
        detected_unit_count=sum(1 for i in tp_ids if counts[i]),
        total_unit_count=sum(1 for c in counts.values() if c),
    )


def privacy_verdict(report: LeakageReport) -> str:
    """``"pass"`` iff strictly less than half of the member PII leaked."""
    frac = report.leakage_fraction
    if frac is None:
        raise PiiError("leakage is undefined: the sampled members contain no PII")
    return "pass" if frac < LEAKAGE_LIMIT else "fail"
