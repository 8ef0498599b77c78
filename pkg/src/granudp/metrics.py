"""Corpus BLEU and baseline rescaling of similarity scores."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .corpus import tokenize

MAX_ORDER = 4


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    CSV_FIELDS = ("run_id", "model_tag", "epsilon", "granularity", "bleu_x100", "p1", "p2", "p3", "p4", "bp")

    def row(self, run_id: str, model_tag: str, epsilon: str, granularity: str) -> dict:
        out = {
            "run_id": run_id,
            "model_tag": model_tag,
            "epsilon": epsilon,
            "granularity": granularity,
            "bleu_x100": 100.0 * self.bleu,
        }
        out.update({f"p{i + 1}": p for i, p in enumerate(self.precisions)})
        out["bp"] = self.brevity_penalty
        return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str], smooth: bool = False) -> BleuReport:
    """BLEU-4 over the whole corpus with clipped n-gram counts, one reference each.

    ``smooth`` adds one to the matched and total counts of every order.
    """
    if len(hypotheses) != len(references):
        raise MetricError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise MetricError("empty corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = tokenize(hyp), tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)

    if smooth:
        precisions = tuple((m + 1) / (t + 1) for m, t in zip(matches, totals))
    else:
        precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))

    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0

    if min(precisions) == 0.0 or bp == 0.0:
        bleu = 0.0
    else:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(min(bleu, 1.0), precisions, bp, hyp_len, ref_len)


@dataclass(frozen=True)
class RescaleBaseline:
    b: float

    def __post_init__(self):
        if not self.b < 1.0:
            raise MetricError(f"baseline must be < 1, got {self.b}")


def rescale_score(f: float, baseline: RescaleBaseline) -> float:
    """(f - b) / (1 - b), with anything below the baseline clipped to 0."""
    return max(0.0, (f - baseline.b) / (1.0 - baseline.b))


def estimate_baseline(random_pair_scores: Sequence[float]) -> RescaleBaseline:
    """Mean raw score over randomly paired texts."""
    if len(random_pair_scores) == 0:
        raise MetricError("need at least one score to estimate a baseline")
    return RescaleBaseline(math.fsum(random_pair_scores) / len(random_pair_scores))
