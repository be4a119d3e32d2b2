"""Task vectors: per-tensor float32 deltas between a tuned model and its base.

Deltas are computed on demand from the parent checkpoints, so a task vector
over a memory-mapped multi-gigabyte checkpoint costs nothing until a tensor is
touched. All arithmetic is float32 and accumulates in ascending model index.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .exceptions import FingerprintMismatchError, ValidationError
from .synth import SALT_DARE, bits_to_unit, keyed_bits
from .tensorio import Checkpoint, from_f32
from .validation import check_same_structure

__all__ = [
    "TaskVector",
    "AveragingWeights",
    "compute_task_vector",
    "apply_task_vector",
    "weighted_average",
    "task_arithmetic_merge",
    "dare_drop",
]


class TaskVector:
    """Named float32 deltas plus fingerprints of the two parent checkpoints."""

    def __init__(
        self,
        shapes: Mapping[str, tuple[int, ...]],
        deltas: Mapping[str, np.ndarray] | Callable[[str], np.ndarray],
        base_fingerprint: str = "",
        source_fingerprint: str = "",
    ):
        self._shapes = {name: tuple(shape) for name, shape in shapes.items()}
        self._deltas = deltas
        self.base_fingerprint = base_fingerprint
        self.source_fingerprint = source_fingerprint

    @classmethod
    def from_arrays(cls, deltas: Mapping[str, np.ndarray], base_fingerprint="", source_fingerprint=""):
        arrays = {name: np.asarray(v, dtype=np.float32) for name, v in deltas.items()}
        return cls({n: a.shape for n, a in arrays.items()}, arrays, base_fingerprint, source_fingerprint)

    @property
    def names(self) -> list[str]:
        return sorted(self._shapes)

    def shape(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    def numel(self, name: str) -> int:
        return int(np.prod(self._shapes[name]))

    def structure(self) -> dict[str, tuple[int, ...]]:
        return {name: self._shapes[name] for name in self.names}

    def __contains__(self, name) -> bool:
        return name in self._shapes

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self._shapes:
            raise KeyError(name)
        if callable(self._deltas):
            value = self._deltas(name)
        else:
            value = self._deltas[name]
        return np.asarray(value, dtype=np.float32).reshape(self._shapes[name])

    @property
    def deltas(self) -> dict[str, np.ndarray]:
        """Materialized copy of every delta tensor."""
        return {name: self[name] for name in self.names}

    def __repr__(self) -> str:
        return f"TaskVector({len(self._shapes)} tensors, base={self.base_fingerprint[:12]!r})"


@dataclass(frozen=True)
class AveragingWeights:
    weights: tuple[float, ...]

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if not w or not all(np.isfinite(w)):
            raise ValidationError("averaging weights must be finite and non-empty")
        object.__setattr__(self, "weights", w)

    @classmethod
    def two_model(cls, w: float) -> AveragingWeights:
        """``(w, 1 - w)``, the convex two-model form; ``w`` must lie in [0, 1]."""
        if not 0.0 <= float(w) <= 1.0:
            raise ValidationError(f"two-model weight must lie in [0, 1], got {w}")
        return cls((float(w), 1.0 - float(w)))

    def __len__(self) -> int:
        return len(self.weights)


def compute_task_vector(tuned: Checkpoint, base: Checkpoint) -> TaskVector:
    check_same_structure(base, tuned, what="tuned checkpoint")
    return TaskVector(
        base.structure(),
        lambda name: tuned.f32(name) - base.f32(name),
        base_fingerprint=base.fingerprint,
        source_fingerprint=tuned.fingerprint,
    )


def _check_base(base: Checkpoint, tv: TaskVector, allow_base_mismatch: bool) -> None:
    check_same_structure(base, tv, what="task vector")
    if not allow_base_mismatch and tv.base_fingerprint != base.fingerprint:
        raise FingerprintMismatchError(
            "task vector was computed against a different base checkpoint "
            f"({tv.base_fingerprint[:16]} != {base.fingerprint[:16]}); "
            "pass allow_base_mismatch=True to override"
        )


def _narrowed(base: Checkpoint, output_dtype: str | None, compute) -> Checkpoint:
    out = Checkpoint(base.metadata)
    for name in base.names:
        dtype = output_dtype or base.dtype(name)
        out.add(name, dtype, base.shape(name), lambda n=name, d=dtype: from_f32(compute(n), d))
    return out


def apply_task_vector(
    base: Checkpoint,
    tv: TaskVector,
    scale: float = 1.0,
    output_dtype: str | None = None,
    allow_base_mismatch: bool = False,
) -> Checkpoint:
    """``base + scale * tv``, computed in float32 and narrowed to the base dtype."""
    if not np.isfinite(scale):
        raise ValidationError("scale must be finite")
    _check_base(base, tv, allow_base_mismatch)
    lam = np.float32(scale)
    return _narrowed(base, output_dtype, lambda n: base.f32(n) + lam * tv[n])


def weighted_average(
    models: Sequence[Checkpoint],
    weights: AveragingWeights | Sequence[float],
    output_dtype: str | None = None,
) -> Checkpoint:
    """``sum_i w_i * theta_i`` with float32 accumulation in model order."""
    if not isinstance(weights, AveragingWeights):
        weights = AveragingWeights(tuple(weights))
    if len(models) < 2:
        raise ValidationError("weighted averaging needs at least two models")
    if len(weights) != len(models):
        raise ValidationError(f"{len(weights)} weights given for {len(models)} models")
    for i, m in enumerate(models[1:], start=1):
        check_same_structure(models[0], m, what=f"model {i}")
    w = [np.float32(x) for x in weights.weights]

    def compute(name):
        acc = w[0] * models[0].f32(name)
        for wi, m in zip(w[1:], models[1:]):
            acc += wi * m.f32(name)
        return acc

    return _narrowed(models[0], output_dtype, compute)


def task_arithmetic_merge(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    coeffs: Sequence[float],
    output_dtype: str | None = None,
    allow_base_mismatch: bool = False,
) -> Checkpoint:
    """``base + sum_i c_i * tau_i``.

    The scaled deltas are summed first (ascending index) and added to the base
    last, so opposite task vectors cancel exactly.
    """
    if not tvs:
        raise ValidationError("task arithmetic needs at least one task vector")
    if len(coeffs) != len(tvs):
        raise ValidationError(f"{len(coeffs)} coefficients given for {len(tvs)} task vectors")
    if not all(np.isfinite(c) for c in coeffs):
        raise ValidationError("coefficients must be finite")
    for tv in tvs:
        _check_base(base, tv, allow_base_mismatch)
    c = [np.float32(x) for x in coeffs]

    def compute(name):
        acc = c[0] * tvs[0][name]
        for ci, tv in zip(c[1:], tvs[1:]):
            acc += ci * tv[name]
        return base.f32(name) + acc

    return _narrowed(base, output_dtype, compute)


def dare_mask(seed: int, name: str, n: int, p: float) -> np.ndarray:
    """True where an element survives dropout with drop probability ``p``."""
    return bits_to_unit(keyed_bits(seed, name, n, SALT_DARE)) >= p


def dare_drop(tv: TaskVector, p: float, seed: int) -> TaskVector:
    """Zero each element with probability ``p``; rescale survivors by 1/(1-p).

    The drop decision for element ``i`` of tensor ``name`` depends only on
    ``(seed, name, i)``.
    """
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"drop probability must lie in [0, 1), got {p}")
    if not 0 <= int(seed) < 2**64:
        raise ValidationError("seed must be an unsigned 64-bit integer")
    rescale = np.float32(1.0 / (1.0 - p))

    def delta(name):
        values = tv[name]
        keep = dare_mask(seed, name, values.size, p).reshape(values.shape)
        return np.where(keep, values * rescale, np.float32(0))

    return TaskVector(tv.structure(), delta, tv.base_fingerprint, tv.source_fingerprint)
