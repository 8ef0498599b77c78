"""Loss-threshold membership inference.

A record is predicted to be a training member iff the target model's loss on
it is at most ``tau``, where ``tau`` is the mean training loss of a
non-private sentence-level reference model. Members are a without-replacement
sample of the training set, sized to match the non-members (val + test).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .corpus import ParallelUnit


class AttackError(ValueError):
    pass


class UnitScorer(Protocol):
    def unit_losses(self, units: Sequence[ParallelUnit]) -> np.ndarray: ...


@dataclass(frozen=True)
class LossRecord:
    unit_id: str
    member: bool
    loss: float

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise AttackError(f"non-finite loss for unit {self.unit_id!r}")


@dataclass(frozen=True)
class Threshold:
    tau: float
    provenance: str

    def __post_init__(self):
        if not np.isfinite(self.tau):
            raise AttackError("tau must be finite")


@dataclass(frozen=True)
class MiaReport:
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float
    advantage: float
    tau: float
    true_positive_ids: tuple[str, ...] = field(default=(), repr=False)

    CSV_FIELDS = ("run_id", "model_tag", "epsilon", "tau", "tp", "fp", "tn", "fn", "tpr", "fpr", "advantage")

    def row(self, run_id: str, model_tag: str, epsilon: str) -> dict:
        return {
            "run_id": run_id,
            "model_tag": model_tag,
            "epsilon": epsilon,
            "tau": self.tau,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "tpr": self.tpr,
            "fpr": self.fpr,
            "advantage": self.advantage,
        }


def threshold_from_losses(losses: Sequence[float], provenance: str) -> Threshold:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise AttackError("cannot compute tau from an empty training set")
    return Threshold(float(losses.mean()), provenance)


def compute_tau(scorer: UnitScorer, train_units: Sequence[ParallelUnit], provenance: str) -> Threshold:
    """Mean per-unit loss of the reference model over its whole training set."""
    if not train_units:
        raise AttackError("cannot compute tau from an empty training set")
    return threshold_from_losses(scorer.unit_losses(train_units), provenance)


def balanced_members(train_units: Sequence[ParallelUnit], n_nonmembers: int, seed: int) -> list[ParallelUnit]:
    if n_nonmembers > len(train_units):
        raise AttackError(f"need {n_nonmembers} members but the training set has only {len(train_units)} units")
    if n_nonmembers < 0:
        raise AttackError("n_nonmembers must be >= 0")
    picks = np.random.default_rng(seed).choice(len(train_units), size=n_nonmembers, replace=False)
    return [train_units[i] for i in sorted(picks)]


def classify(records: Sequence[LossRecord], tau: Threshold) -> MiaReport:
    if not records:
        raise AttackError("no records to classify")
    tp = fp = tn = fn = 0
    tp_ids = []
    for r in records:
        predicted = r.loss <= tau.tau
        if r.member and predicted:
            tp += 1
            tp_ids.append(r.unit_id)
        elif r.member:
            fn += 1
        elif predicted:
            fp += 1
        else:
            tn += 1
    tpr = tp / (tp + fn) if tp + fn else 0.0
    fpr = fp / (fp + tn) if fp + tn else 0.0
    return MiaReport(tp, fp, tn, fn, tpr, fpr, tpr - fpr, tau.tau, tuple(sorted(tp_ids)))


def attack_model(
    scorer: UnitScorer,
    members: Sequence[ParallelUnit],
    nonmembers: Sequence[ParallelUnit],
    tau: Threshold,
) -> MiaReport:
    """Score sentence-level members and non-members with ``scorer`` and classify."""
    if len(members) != len(nonmembers):
        raise AttackError(f"imbalanced attack set: {len(members)} members vs {len(nonmembers)} non-members")
    overlap = {u.unit_id for u in members} & {u.unit_id for u in nonmembers}
    if overlap:
        raise AttackError(f"units appear as both member and non-member: {sorted(overlap)[:5]}")
    losses = scorer.unit_losses(list(members) + list(nonmembers))
    records = [LossRecord(u.unit_id, True, float(l)) for u, l in zip(members, losses[: len(members)])]
    records += [LossRecord(u.unit_id, False, float(l)) for u, l in zip(nonmembers, losses[len(members) :])]
    return classify(records, tau)
