import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slackmerge import (
    SynthSpec,
    TaskVector,
    TensorSpec,
    ValidationError,
    conflict_report,
    generate_checkpoint,
    series_analysis,
    slack_reserve,
    trim,
)
from slackmerge.conflict import REPORT_FIELDS, format_table, series_csv, series_document

from helpers import ckpt, trimmed


def brute_force_counts(p, o):
    counts = dict.fromkeys(("conflicts", "discarded_protected", "discarded_other", "zero_sum_ties"), 0)
    for a, b in zip(p.tolist(), o.tolist()):
        if a == 0 or b == 0 or (a > 0) == (b > 0):
            continue
        counts["conflicts"] += 1
        if abs(a) < abs(b):
            counts["discarded_protected"] += 1
        elif abs(b) < abs(a):
            counts["discarded_other"] += 1
        else:
            counts["zero_sum_ties"] += 1
    return counts


def test_hand_example():
    r = conflict_report(trimmed([1.0, -2.0, 0.5]), trimmed([-1.5, 3.0, 0.4]))
    assert (r.conflicts, r.discarded_protected, r.discarded_other, r.zero_sum_ties) == (2, 2, 0, 0)
    assert r.retained_protected == 3 and r.overlap == 3
    assert r.discard_proportion == pytest.approx(2 / 3)


def test_self_comparison_has_no_conflicts(rng):
    t = trimmed(rng.standard_normal(30), 0.5)
    r = conflict_report(t, t)
    assert r.conflicts == 0 and r.discard_proportion == 0


def test_empty_protected_gives_zero_proportion():
    r = conflict_report(trimmed([1.0, 2.0], 0.0), trimmed([-1.0, -2.0]))
    assert r.retained_protected == 0 and r.discard_proportion == 0.0


def _pair(seed, kp, ko):
    gen = np.random.default_rng(seed)
    shapes = {"a": (4, 3), "b": (7,)}
    p = {n: (gen.integers(-3, 4, s) / 2).astype(np.float32) for n, s in shapes.items()}
    o = {n: (gen.integers(-3, 4, s) / 2).astype(np.float32) for n, s in shapes.items()}
    return trimmed(p, kp, "global"), trimmed(o, ko, "global")


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32), kp=st.floats(0, 1), ko=st.floats(0, 1))
def test_partition_and_brute_force(seed, kp, ko):
    p, o = _pair(seed, kp, ko)
    r = conflict_report(p, o)
    assert r.discarded_protected + r.discarded_other + r.zero_sum_ties == r.conflicts
    flat_p = np.concatenate([p[n].reshape(-1) for n in p.names])
    flat_o = np.concatenate([o[n].reshape(-1) for n in o.names])
    for field, value in brute_force_counts(flat_p, flat_o).items():
        assert getattr(r, field) == value
    assert r.conflicts <= r.overlap <= min(r.retained_protected, r.retained_other)
    # per-tensor breakdown sums to the totals
    for field in ("conflicts", "discarded_protected", "overlap"):
        assert sum(t[field] for t in r.per_tensor.values()) == getattr(r, field)
    # swapping roles swaps the discard columns
    swapped = conflict_report(o, p)
    assert (swapped.conflicts, swapped.zero_sum_ties) == (r.conflicts, r.zero_sum_ties)
    assert (swapped.discarded_protected, swapped.discarded_other) == (r.discarded_other, r.discarded_protected)
    # the analysis and the slack mechanism agree on the losing positions
    assert r.discarded_protected == len(slack_reserve(p, o, 1.0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_scaling_other_never_lowers_discards(seed):
    gen = np.random.default_rng(seed)
    p = trimmed(gen.standard_normal(50), 0.3)
    tau = gen.standard_normal(50).astype(np.float32)
    previous = -1
    for c in (1, 2, 4):
        r = conflict_report(p, trim(TaskVector.from_arrays({"w": tau * np.float32(c)}), 1.0))
        assert r.discarded_protected >= previous
        previous = r.discarded_protected


def test_series_of_one_equals_single_report(rng):
    base, prot, other = (ckpt(w=rng.standard_normal(40)) for _ in range(3))
    (point,) = series_analysis(base, prot, [other], k_protected=0.2, k_other=1.0)
    from slackmerge import compute_task_vector

    direct = conflict_report(
        trim(compute_task_vector(prot, base), 0.2, "global"),
        trim(compute_task_vector(other, base), 1.0, "global"),
    )
    assert point.report == direct
    assert point.tag == "0"


def test_series_on_synthetic_growth():
    tensors = [TensorSpec("a", (30, 10)), TensorSpec("b", (100,))]
    base = generate_checkpoint(SynthSpec(1, tensors))
    base_arrays = {t.name: base.f32(t.name) for t in tensors}
    prot = ckpt(**{n: v + 0.1 * generate_checkpoint(SynthSpec(2, tensors)).f32(n) for n, v in base_arrays.items()})
    direction = generate_checkpoint(SynthSpec(3, tensors))
    series = [
        ckpt(**{n: v + np.float32(0.02 * i) * direction.f32(n) for n, v in base_arrays.items()})
        for i in range(1, 8)
    ]
    tags = [f"step{i}" for i in range(1, 8)]
    points = series_analysis(base, prot, series, tags=tags, threads=3)
    assert [p.tag for p in points] == tags
    proportions = [p.report.discard_proportion for p in points]
    assert proportions == sorted(proportions)
    assert proportions[-1] > proportions[0]
    # thread count does not change anything
    assert [p.report for p in series_analysis(base, prot, series, tags=tags)] == [p.report for p in points]


def test_series_errors(rng):
    base = ckpt(w=rng.standard_normal(4))
    with pytest.raises(ValidationError):
        series_analysis(base, base, [])
    with pytest.raises(ValidationError):
        series_analysis(base, base, [base], tags=["a", "b"])
    with pytest.raises(ValidationError):
        series_analysis(base, base, [ckpt(w=[1.0])])


def test_report_renderings(rng):
    base, prot, other = (ckpt(w=rng.standard_normal(40)) for _ in range(3))
    points = series_analysis(base, prot, [other, prot], tags=["x", "y"])
    doc = series_document(points)
    assert [r["tag"] for r in doc["records"]] == ["x", "y"]
    rows = list(csv.reader(io.StringIO(series_csv(points))))
    assert rows[0] == ["tag", *REPORT_FIELDS]
    assert rows[1][0] == "x" and int(rows[1][4]) == points[0].report.conflicts
    table = format_table([(p.tag, p.report) for p in points])
    assert table.splitlines()[0].split() == ["tag", *REPORT_FIELDS]
    assert len(table.splitlines()) == 3
