"""TIES merging (trim, elect signs, disjoint merge) and its slack-variable variant.

The functional pieces (:func:`trim`, :func:`elect_signs`, :func:`disjoint_merge`,
:func:`slack_reserve`) operate on whole task vectors and are convenient at
small scale. :class:`TiesEngine` chains the same per-tensor kernels lazily so a
merge streams tensor by tensor; only global trimming and slack ranking need
extra statistics passes over the inputs.
"""

from __future__ import annotations

import threading
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .exceptions import ValidationError
from .select import SelectPlan, magnitude_keys, select_top, top_mask
from .synth import MASK64
from .taskvec import TaskVector, compute_task_vector, dare_drop
from .tensorio import Checkpoint, from_f32
from .validation import check_density, check_finite, check_same_structure, n_keep

__all__ = [
    "GRANULARITIES",
    "TrimmedDelta",
    "SignTensor",
    "SlackReservation",
    "trim",
    "elect_signs",
    "disjoint_merge",
    "slack_reserve",
    "TiesEngine",
]

GRANULARITIES = ("per_tensor", "global")


class TrimmedDelta:
    """A task vector restricted to its largest-magnitude entries.

    Values and keep-masks are recomputed from ``source`` on access. A kept
    position whose value is exactly zero still counts as retained, which is
    why the mask is tracked separately from the values.
    """

    def __init__(self, source, density: float, granularity: str, plan: SelectPlan | None = None):
        self.source = source
        self.density = density
        self.granularity = granularity
        self.base_fingerprint = getattr(source, "base_fingerprint", "")
        self._plan = plan
        self._index = {name: i for i, name in enumerate(source.names)}
        if granularity == "global":
            self.retained_per_tensor = {n: plan.kept[i] for n, i in self._index.items()}
        else:
            self.retained_per_tensor = {n: n_keep(density, source.numel(n)) for n in source.names}
        self.retained_total = sum(self.retained_per_tensor.values())

    @property
    def names(self) -> list[str]:
        return self.source.names

    def structure(self):
        return self.source.structure()

    def shape(self, name):
        return self.source.shape(name)

    def numel(self, name):
        return self.source.numel(name)

    def trimmed(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(values, mask)`` for one tensor; values are zero where mask is False."""
        values = self.source[name]
        keys = magnitude_keys(values)
        if self.granularity == "global":
            mask = self._plan.mask(self._index[name], keys)
        else:
            mask = top_mask(keys, self.retained_per_tensor[name])
        mask = mask.reshape(values.shape)
        return np.where(mask, values, np.float32(0)), mask

    def __getitem__(self, name: str) -> np.ndarray:
        return self.trimmed(name)[0]

    def mask(self, name: str) -> np.ndarray:
        return self.trimmed(name)[1]

    @property
    def deltas(self) -> dict[str, np.ndarray]:
        return {name: self[name] for name in self.names}

    def __repr__(self) -> str:
        return (
            f"TrimmedDelta(density={self.density}, granularity={self.granularity!r}, "
            f"retained={self.retained_total})"
        )


def trim(tv, k: float, granularity: str = "per_tensor") -> TrimmedDelta:
    """Keep the top-``k`` fraction of entries by magnitude.

    ``per_tensor`` keeps ``max(1, round(k * numel))`` entries in each tensor;
    ``global`` keeps that many across the whole vector, found by exact radix
    selection. Ties at the threshold go to the smaller (tensor name, flat
    index). ``k = 0`` keeps nothing.
    """
    k = check_density(k)
    if granularity not in GRANULARITIES:
        raise ValidationError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    plan = None
    if granularity == "global":
        total = sum(tv.numel(n) for n in tv.names)
        plan = select_top(
            lambda: (magnitude_keys(tv[n]) for n in tv.names), n_keep(k, total), key_bits=32
        )
    return TrimmedDelta(tv, k, granularity, plan)


@dataclass
class SignTensor:
    signs: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.signs[name]


def _check_trimmed(trimmed: Sequence) -> None:
    if not trimmed:
        raise ValidationError("need at least one trimmed delta")
    for i, t in enumerate(trimmed[1:], start=1):
        check_same_structure(trimmed[0], t, what=f"trimmed delta {i}")


def elect_signs(trimmed: Sequence[TrimmedDelta]) -> SignTensor:
    """Per position, the sign of the float32 sum of the trimmed values."""
    _check_trimmed(trimmed)
    return SignTensor({n: kernels.elect([t[n] for t in trimmed]) for n in trimmed[0].names})


def disjoint_merge(
    trimmed: Sequence[TrimmedDelta], signs: SignTensor, normalize: bool = False
) -> TaskVector:
    _check_trimmed(trimmed)
    out = {}
    for name in trimmed[0].names:
        pairs = [t.trimmed(name) for t in trimmed]
        out[name] = kernels.disjoint_mean(
            [v for v, _ in pairs], signs[name], [m for _, m in pairs], normalize
        )
    return TaskVector.from_arrays(out, base_fingerprint=trimmed[0].base_fingerprint)


@dataclass
class SlackReservation:
    """Positions where the protected model keeps its value despite losing election.

    ``reserved`` maps tensor name to sorted flat indices.
    """

    reserved: dict[str, np.ndarray]
    slack_fraction: float
    protected_model: int = 0
    candidates: int = 0
    per_tensor_candidates: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.reserved.values())

    @property
    def positions(self) -> set[tuple[str, int]]:
        return {(name, int(i)) for name, idx in self.reserved.items() for i in idx}


class _SlackPlan:
    """Global ranking of discard candidates by magnitude deficit."""

    def __init__(self, protected: TrimmedDelta, other: TrimmedDelta, s: float):
        self.protected, self.other = protected, other
        self.names = protected.names
        self.requested = round(s * protected.retained_total)

        def chunks():
            for name in self.names:
                p, o = protected[name].reshape(-1), other[name].reshape(-1)
                yield kernels.deficit_keys(p, o, kernels.discard_candidates(p, o))

        self.plan = select_top(chunks, self.requested, key_bits=64)
        self._index = {name: i for i, name in enumerate(self.names)}

    def reserved(self, name: str, p: np.ndarray, o: np.ndarray) -> tuple[np.ndarray, int]:
        """Reserved flat indices in one tensor, plus its candidate count."""
        p, o = p.reshape(-1), o.reshape(-1)
        cand = kernels.discard_candidates(p, o)
        keys = kernels.deficit_keys(p, o, cand)
        return cand[self.plan.mask(self._index[name], keys)], cand.size


def slack_reserve(
    protected: TrimmedDelta, other: TrimmedDelta, s: float, protected_model: int = 0
) -> SlackReservation:
    """Choose which of the protected model's losing positions to keep.

    Candidates are positions where both values are nonzero with opposite signs
    and the protected magnitude is strictly smaller. The ``round(s * R)``
    candidates with the smallest deficit ``|other| - |protected|`` are
    reserved, where ``R`` is the protected model's retained count.
    """
    s = check_density(s, "slack")
    check_same_structure(protected, other, what="other trimmed delta")
    plan = _SlackPlan(protected, other, s)
    reserved, per_tensor = {}, {}
    for name in protected.names:
        idx, n_cand = plan.reserved(name, protected[name], other[name])
        reserved[name] = idx
        per_tensor[name] = n_cand
    return SlackReservation(reserved, s, protected_model, sum(per_tensor.values()), per_tensor)


class TiesEngine:
    """Lazy, per-tensor TIES / TIES-SV / DARE-TIES merge.

    Construction performs every global statistics pass (global trim
    thresholds, slack ranking). After that :meth:`merged_delta` is a pure
    function of the tensor name, so tensors can be computed in any order or
    concurrently with bit-identical results.
    """

    def __init__(
        self,
        base: Checkpoint,
        models: Sequence[Checkpoint],
        densities: Sequence[float],
        scale: float = 1.0,
        granularity: str = "per_tensor",
        normalize: bool = False,
        slack: float | None = None,
        protected_model: int = 0,
        drop_p: float | None = None,
        seed: int = 0,
        output_dtype: str | None = None,
    ):
        if not models:
            raise ValidationError("need at least one model to merge")
        if len(densities) != len(models):
            raise ValidationError(f"{len(densities)} densities given for {len(models)} models")
        if slack is not None:
            if len(models) != 2:
                raise ValidationError(f"slack reservation needs exactly 2 models, got {len(models)}")
            if protected_model not in (0, 1):
                raise ValidationError("protected_model must be 0 or 1")
        self.base = base
        self.scale = check_finite(scale, "scale")
        self.normalize = bool(normalize)
        self.protected_model = protected_model
        self.output_dtype = output_dtype

        tvs = [compute_task_vector(m, base) for m in models]
        if drop_p is not None:
            tvs = [dare_drop(tv, drop_p, (int(seed) + i) & MASK64) for i, tv in enumerate(tvs)]
        self.task_vectors = tvs
        self.trimmed = [trim(tv, k, granularity) for tv, k in zip(tvs, densities)]

        self.slack_plan = None
        if slack is not None:
            other = 1 - protected_model
            self.slack_plan = _SlackPlan(
                self.trimmed[protected_model], self.trimmed[other], check_density(slack, "slack")
            )
        self.stats: dict[str, dict] = {}
        self._lock = threading.Lock()

    @property
    def names(self) -> list[str]:
        return self.base.names

    def merged_delta(self, name: str) -> np.ndarray:
        pairs = [t.trimmed(name) for t in self.trimmed]
        values = [v for v, _ in pairs]
        masks = [m for _, m in pairs]
        signs = kernels.elect(values)
        stats = {"retained": [int(np.count_nonzero(m)) for m in masks]}

        if self.slack_plan is not None:
            p_idx = self.protected_model
            protected, other = values[p_idx], values[1 - p_idx]
            reserved, n_cand = self.slack_plan.reserved(name, protected, other)
            flat = signs.reshape(-1)
            flat[reserved] = np.sign(protected.reshape(-1)[reserved]).astype(np.int8)
            stats["candidates"] = n_cand
            stats["reserved"] = int(reserved.size)

        stats["sign_discarded"] = kernels.sign_discards(values, signs)
        if len(values) == 2:
            p_idx = self.protected_model
            stats["conflict"] = kernels.conflict_counts(
                values[p_idx], values[1 - p_idx], masks[p_idx], masks[1 - p_idx]
            )
        with self._lock:
            self.stats[name] = stats
        return kernels.disjoint_mean(values, signs, masks, self.normalize)

    def merged_tensor(self, name: str) -> np.ndarray:
        """``base + scale * merged_delta`` in float32."""
        return self.base.f32(name) + np.float32(self.scale) * self.merged_delta(name)

    def output(self) -> Checkpoint:
        """Lazy merged checkpoint; tensors are computed when read or written."""
        out = Checkpoint(self.base.metadata)
        for name in self.names:
            dtype = self.output_dtype or self.base.dtype(name)
            out.add(
                name,
                dtype,
                self.base.shape(name),
                lambda n=name, d=dtype: from_f32(self.merged_tensor(n), d),
            )
        return out

    def summary(self) -> dict:
        """Aggregate of per-tensor statistics gathered so far."""
        n_models = len(self.trimmed)
        summary = {
            "retained_total": [t.retained_total for t in self.trimmed],
            "sign_discarded_total": [
                sum(s["sign_discarded"][i] for s in self.stats.values()) for i in range(n_models)
            ],
        }
        if self.slack_plan is not None:
            summary["slack_candidates"] = sum(s["candidates"] for s in self.stats.values())
            summary["slack_reserved"] = sum(s["reserved"] for s in self.stats.values())
            summary["slack_requested"] = self.slack_plan.requested
        if n_models == 2:
            conflict = {
                f: sum(s["conflict"][f] for s in self.stats.values())
                for f in kernels.CONFLICT_FIELDS
            }
            retained = conflict["retained_protected"]
            conflict["discard_proportion"] = (
                conflict["discarded_protected"] / retained if retained else 0.0
            )
            conflict["protected_model"] = self.protected_model
            summary["conflict"] = conflict
        return summary
