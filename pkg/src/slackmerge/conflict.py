"""Counting sign conflicts between two trimmed task vectors.

For a protected model (the one whose parameters we care about losing) and
another model, every position retained by both with opposite signs is a
conflict. Each conflict is resolved one of three ways at sign election: the
protected value loses (smaller magnitude), the other value loses, or the two
cancel exactly. The discard proportion is the share of the protected model's
retained parameters that lose.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import kernels
from .exceptions import ValidationError
from .taskvec import compute_task_vector
from .tensorio import Checkpoint
from .ties import TrimmedDelta, trim
from .validation import check_same_structure

__all__ = ["ConflictReport", "SeriesPoint", "conflict_report", "series_analysis"]

REPORT_FIELDS = kernels.CONFLICT_FIELDS + ("discard_proportion",)


def _proportion(counts: dict) -> float:
    retained = counts["retained_protected"]
    return counts["discarded_protected"] / retained if retained else 0.0


@dataclass
class ConflictReport:
    retained_protected: int = 0
    retained_other: int = 0
    overlap: int = 0
    conflicts: int = 0
    discarded_protected: int = 0
    discarded_other: int = 0
    zero_sum_ties: int = 0
    discard_proportion: float = 0.0
    per_tensor: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, per_tensor: dict[str, dict]) -> ConflictReport:
        totals = {f: sum(c[f] for c in per_tensor.values()) for f in kernels.CONFLICT_FIELDS}
        breakdown = {
            name: {**counts, "discard_proportion": _proportion(counts)}
            for name, counts in per_tensor.items()
        }
        return cls(**totals, discard_proportion=_proportion(totals), per_tensor=breakdown)

    def totals(self) -> dict:
        return {f: getattr(self, f) for f in REPORT_FIELDS}

    def to_dict(self) -> dict:
        return {**self.totals(), "per_tensor": self.per_tensor}


def conflict_report(protected: TrimmedDelta, other: TrimmedDelta) -> ConflictReport:
    check_same_structure(protected, other, what="other trimmed delta")
    per_tensor = {}
    for name in protected.names:
        p, pm = protected.trimmed(name)
        o, om = other.trimmed(name)
        per_tensor[name] = kernels.conflict_counts(p, o, pm, om)
    return ConflictReport.from_counts(per_tensor)


@dataclass
class SeriesPoint:
    tag: str
    report: ConflictReport

    def to_dict(self) -> dict:
        return {"tag": self.tag, **self.report.to_dict()}


def series_analysis(
    base: Checkpoint,
    protected_model: Checkpoint,
    checkpoints: Sequence[Checkpoint],
    k_protected: float = 0.2,
    k_other: float = 1.0,
    granularity: str = "global",
    tags: Sequence[str] | None = None,
    threads: int = 1,
) -> list[SeriesPoint]:
    """Conflict report of ``protected_model`` against each checkpoint in turn.

    Densities stay frozen across the series so the reports are comparable.
    Records come back in input order whatever ``threads`` is.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise ValidationError("series analysis needs at least one checkpoint")
    if tags is None:
        tags = [str(i) for i in range(len(checkpoints))]
    tags = [str(t) for t in tags]
    if len(tags) != len(checkpoints):
        raise ValidationError(f"{len(tags)} tags given for {len(checkpoints)} checkpoints")
    for i, ckpt in enumerate(checkpoints):
        check_same_structure(base, ckpt, what=f"checkpoint {i}")

    protected = trim(compute_task_vector(protected_model, base), k_protected, granularity)

    def analyze(ckpt):
        other = trim(compute_task_vector(ckpt, base), k_other, granularity)
        return conflict_report(protected, other)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(analyze, checkpoints))
    else:
        reports = [analyze(c) for c in checkpoints]
    return [SeriesPoint(tag, report) for tag, report in zip(tags, reports)]


def series_document(series: Sequence[SeriesPoint]) -> dict:
    return {"records": [point.to_dict() for point in series]}


def series_csv(series: Sequence[SeriesPoint]) -> str:
    """Flat table, one row per checkpoint, header row first."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("tag",) + REPORT_FIELDS)
    for point in series:
        totals = point.report.totals()
        writer.writerow([point.tag] + [totals[f] for f in REPORT_FIELDS])
    return buf.getvalue()


def format_table(rows: Sequence[tuple[str, ConflictReport]]) -> str:
    """Aligned human-readable table of report totals."""
    header = ("tag",) + REPORT_FIELDS
    body = []
    for tag, report in rows:
        totals = report.totals()
        body.append(
            [tag]
            + [str(totals[f]) for f in kernels.CONFLICT_FIELDS]
            + [f"{totals['discard_proportion']:.4%}"]
        )
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)
