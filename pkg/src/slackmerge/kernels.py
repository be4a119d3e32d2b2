"""Per-tensor kernels for sign election, disjoint merging and conflict counting.

Inputs are flat float32 arrays of trimmed deltas (zeros at discarded
positions). Every loop over models runs in ascending model index so results
do not depend on how tensors are scheduled across threads.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

CONFLICT_FIELDS = (
    "retained_protected",
    "retained_other",
    "overlap",
    "conflicts",
    "discarded_protected",
    "discarded_other",
    "zero_sum_ties",
)


def elect(values: Sequence[np.ndarray]) -> np.ndarray:
    """sgn of the float32 sum over models, as int8 in {-1, 0, +1}."""
    total = values[0].astype(np.float32, copy=True)
    for v in values[1:]:
        total += v
    return np.sign(total).astype(np.int8)


def disjoint_mean(
    values: Sequence[np.ndarray],
    signs: np.ndarray,
    masks: Sequence[np.ndarray] | None = None,
    normalize: bool = False,
) -> np.ndarray:
    """Mean of the nonzero values whose sign matches the elected sign.

    With ``normalize`` the divisor is the number of models that kept the
    position after trimming (``masks``), not the number of agreeing values.
    Positions with nothing to average are 0.
    """
    total = np.zeros(signs.shape, dtype=np.float32)
    count = np.zeros(signs.shape, dtype=np.int32)
    for v in values:
        agree = (v != 0) & (np.sign(v).astype(np.int8) == signs)
        total += np.where(agree, v, np.float32(0))
        count += agree
    if normalize:
        divisor = np.zeros(signs.shape, dtype=np.int32)
        for m in masks:
            divisor += m
        divisor = np.where(count > 0, divisor, 0)
    else:
        divisor = count
    out = np.zeros(signs.shape, dtype=np.float32)
    nz = divisor > 0
    out[nz] = total[nz] / divisor[nz].astype(np.float32)
    return out


def sign_discards(values: Sequence[np.ndarray], signs: np.ndarray) -> list[int]:
    """Per model, how many nonzero trimmed values disagree with the elected sign."""
    return [
        int(np.count_nonzero((v != 0) & (np.sign(v).astype(np.int8) != signs))) for v in values
    ]


def opposite_signs(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a != 0) & (b != 0) & (np.signbit(a) != np.signbit(b))


def discard_candidates(protected: np.ndarray, other: np.ndarray) -> np.ndarray:
    """Flat indices where the protected value loses sign election outright."""
    lose = opposite_signs(protected, other) & (np.abs(protected) < np.abs(other))
    return np.flatnonzero(lose)


def deficit_keys(protected: np.ndarray, other: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """uint64 keys ordering candidates by *descending* magnitude deficit.

    The deficit ``|other| - |protected|`` is positive, so its float64 bit
    pattern is monotone; inverting the bits turns "smallest deficit first"
    into "largest key first" for :func:`slackmerge.select.select_top`.
    """
    deficit = np.abs(other[candidates]).astype(np.float64) - np.abs(protected[candidates]).astype(
        np.float64
    )
    return ~deficit.view(np.uint64)


def conflict_counts(
    protected: np.ndarray,
    other: np.ndarray,
    protected_mask: np.ndarray,
    other_mask: np.ndarray,
) -> dict[str, int]:
    conflict = opposite_signs(protected, other)
    mag_p, mag_o = np.abs(protected), np.abs(other)
    return {
        "retained_protected": int(np.count_nonzero(protected_mask)),
        "retained_other": int(np.count_nonzero(other_mask)),
        "overlap": int(np.count_nonzero(protected_mask & other_mask)),
        "conflicts": int(np.count_nonzero(conflict)),
        "discarded_protected": int(np.count_nonzero(conflict & (mag_p < mag_o))),
        "discarded_other": int(np.count_nonzero(conflict & (mag_o < mag_p))),
        "zero_sum_ties": int(np.count_nonzero(conflict & (mag_p == mag_o))),
    }
