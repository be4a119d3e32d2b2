"""Input validation helpers shared by the functional API and the estimators."""

from __future__ import annotations

import math

from .exceptions import ValidationError


def check_same_structure(reference, other, what: str = "input") -> None:
    """Raise unless ``other`` has exactly the tensor names and shapes of ``reference``.

    Works for anything exposing ``structure()`` (checkpoints, task vectors,
    trimmed deltas). Shape mismatches are never auto-resized.
    """
    ref, got = reference.structure(), other.structure()
    if ref.keys() != got.keys():
        missing = sorted(ref.keys() - got.keys())[:5]
        extra = sorted(got.keys() - ref.keys())[:5]
        raise ValidationError(f"{what}: tensor names differ (missing {missing}, unexpected {extra})")
    for name, shape in ref.items():
        if got[name] != shape:
            raise ValidationError(f"{what}: tensor {name!r} has shape {got[name]}, expected {shape}")


def check_density(k, name: str = "density") -> float:
    k = float(k)
    if not 0.0 <= k <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {k}")
    return k


def check_fraction(s, name: str = "slack") -> float:
    return check_density(s, name)


def check_finite(x, name: str) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValidationError(f"{name} must be finite, got {x}")
    return x


def check_checkpoints(models, minimum: int = 1) -> list:
    from .tensorio import Checkpoint

    models = list(models)
    if len(models) < minimum:
        raise ValidationError(f"expected at least {minimum} checkpoint(s), got {len(models)}")
    for i, m in enumerate(models):
        if not isinstance(m, Checkpoint):
            raise ValidationError(f"item {i} is {type(m).__name__}, not a Checkpoint")
    for i, m in enumerate(models[1:], start=1):
        check_same_structure(models[0], m, what=f"checkpoint {i}")
    return models


def n_keep(k: float, numel: int) -> int:
    """Positions kept at density ``k``: ``max(1, round(k * numel))`` for k > 0, capped at numel.

    ``round`` is Python's round-half-to-even.
    """
    if k <= 0 or numel == 0:
        return 0
    return min(numel, max(1, round(k * numel)))
