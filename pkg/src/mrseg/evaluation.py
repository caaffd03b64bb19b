"""Per-round mIoU / cIoU scoring of mask predictions.

Accumulators are exact: integer intersection and union sums, and the sum
of per-sample ratios kept as a ``Fraction``. Reduction is therefore
associative and independent of sample order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Optional, Sequence

from . import maskops
from .annotations import MaskSpec
from .convgen import Conversation


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    conversation_id: str
    round_index: int
    mask: MaskSpec

    @classmethod
    def from_record(cls, rec: Mapping) -> "PredictionRecord":
        return cls(rec["conversation_id"], int(rec["round_index"]), MaskSpec.from_coco(rec["mask"]))

    def to_record(self) -> dict:
        return {"conversation_id": self.conversation_id, "round_index": self.round_index,
                "mask": self.mask.to_json(compressed=True)}


@dataclass(frozen=True)
class RoundStats:
    """Exact accumulator for one round (or the overall row)."""

    samples: int = 0
    empty: int = 0  # samples with union 0, excluded from both means
    inter: int = 0
    union: int = 0
    ratio_sum: Fraction = Fraction(0)

    def add(self, inter: int, union: int) -> "RoundStats":
        if union == 0:
            return RoundStats(self.samples + 1, self.empty + 1, self.inter, self.union,
                              self.ratio_sum)
        return RoundStats(self.samples + 1, self.empty, self.inter + inter, self.union + union,
                          self.ratio_sum + Fraction(inter, union))

    def merge(self, other: "RoundStats") -> "RoundStats":
        return RoundStats(self.samples + other.samples, self.empty + other.empty,
                          self.inter + other.inter, self.union + other.union,
                          self.ratio_sum + other.ratio_sum)

    @property
    def scored(self) -> int:
        return self.samples - self.empty

    @property
    def miou(self) -> float:
        return float(self.ratio_sum / self.scored) if self.scored else float("nan")

    @property
    def ciou(self) -> float:
        return self.inter / self.union if self.union else float("nan")


@dataclass(frozen=True)
class EvalReport:
    rows: Mapping[int, RoundStats] = field(default_factory=dict)

    @property
    def overall(self) -> RoundStats:
        total = RoundStats()
        for r in self.rows.values():
            total = total.merge(r)
        return total


def _pred_key(p: PredictionRecord) -> tuple:
    return (p.conversation_id, p.round_index)


def score(preds: Iterable[PredictionRecord], conversations: Sequence[Conversation]) -> EvalReport:
    """Score predictions against the target masks of every round.

    Missing predictions count as empty masks; predictions for rounds that
    do not exist are an error.
    """
    by_id = {c.conversation_id: c for c in conversations}
    table: dict = {}
    dupes = []
    unknown = []
    for p in preds:
        key = _pred_key(p)
        conv = by_id.get(p.conversation_id)
        if conv is None or not 1 <= p.round_index <= len(conv.rounds):
            unknown.append(key)
            continue
        if key in table:
            dupes.append(key)
        table[key] = p
    if unknown:
        raise ScoringError(f"predictions for nonexistent rounds: {unknown}")
    if dupes:
        raise ScoringError(f"duplicate predictions: {dupes}")

    rows: dict = {}
    for conv in conversations:
        for rnd in conv.rounds:
            gt = conv.target_mask(rnd.index)
            pred = table.get((conv.conversation_id, rnd.index))
            if pred is None:
                inter, union = 0, int(gt.sum())
            else:
                try:
                    grid = pred.mask.to_grid(conv.height, conv.width)
                except ValueError as exc:
                    raise ScoringError(f"{conv.conversation_id} round {rnd.index}: {exc}") from None
                inter, union = maskops.iou(grid, gt)
            rows[rnd.index] = rows.get(rnd.index, RoundStats()).add(inter, union)
    return EvalReport(dict(sorted(rows.items())))


def _fmt(x: float) -> str:
    return "   n/a" if x != x else f"{100 * x:6.2f}"


def emit_report(report: EvalReport, fmt: str = "table") -> str:
    if fmt == "table":
        lines = ["round  samples  empty    mIoU    cIoU",
                 "-----  -------  -----  ------  ------"]
        for idx in sorted(report.rows):
            r = report.rows[idx]
            lines.append(f"{idx:5d}  {r.samples:7d}  {r.empty:5d}  {_fmt(r.miou)}  {_fmt(r.ciou)}")
        if report.rows:
            o = report.overall
            lines.append("-----  -------  -----  ------  ------")
            lines.append(f"  all  {o.samples:7d}  {o.empty:5d}  {_fmt(o.miou)}  {_fmt(o.ciou)}")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        def row(r: RoundStats) -> dict:
            return {"samples": r.samples, "empty": r.empty, "intersection": r.inter,
                    "union": r.union, "ratio_sum": [r.ratio_sum.numerator, r.ratio_sum.denominator],
                    "miou": None if r.miou != r.miou else r.miou,
                    "ciou": None if r.ciou != r.ciou else r.ciou}
        doc = {"rounds": [{"round": i, **row(report.rows[i])} for i in sorted(report.rows)],
               "overall": row(report.overall)}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> EvalReport:
    doc = json.loads(text)
    rows = {}
    for r in doc["rounds"]:
        num, den = r["ratio_sum"]
        rows[int(r["round"])] = RoundStats(r["samples"], r["empty"], r["intersection"],
                                           r["union"], Fraction(num, den))
    return EvalReport(rows)
