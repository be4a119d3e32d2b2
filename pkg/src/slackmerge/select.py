"""Exact top-n selection over unsigned keys by most-significant-digit radix.

Keys are unsigned integers (``uint32`` or ``uint64``) spread over an ordered
sequence of chunks, typically one chunk per tensor in sorted-name order. The
n largest keys are kept; among keys equal to the threshold, earlier chunks and
smaller flat indices win. Nothing is sampled or approximated.

Each radix pass streams over the chunks once, so the chunks are supplied by a
factory that can be called repeatedly (re-reading or recomputing the data)
instead of being held in memory together.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

_DIGIT_BITS = 16
_DIGIT_MASK = (1 << _DIGIT_BITS) - 1


def magnitude_keys(values: np.ndarray) -> np.ndarray:
    """Map float32 values to uint32 keys ordered like ``abs(values)``.

    For non-negative IEEE floats the bit pattern is monotone in the value, so
    clearing the sign bit gives an exact magnitude order without arithmetic.
    NaNs sort above infinity.
    """
    bits = np.ascontiguousarray(values, dtype=np.float32).reshape(-1).view(np.uint32)
    return bits & np.uint32(0x7FFFFFFF)


@dataclass(frozen=True)
class SelectPlan:
    """Outcome of a selection: keep keys above ``threshold`` and the first
    ``quotas[i]`` keys equal to it in chunk ``i``.

    ``threshold`` is ``None`` when nothing is kept and ``-1`` when everything
    is kept.
    """

    threshold: int | None
    quotas: tuple[int, ...]
    kept: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.kept)

    def mask(self, chunk_index: int, keys: np.ndarray) -> np.ndarray:
        keys = keys.reshape(-1)
        if self.threshold is None:
            return np.zeros(keys.size, dtype=bool)
        if self.threshold < 0:
            return np.ones(keys.size, dtype=bool)
        return mask_from_threshold(keys, self.threshold, self.quotas[chunk_index])


def mask_from_threshold(keys: np.ndarray, threshold: int, quota: int) -> np.ndarray:
    t = keys.dtype.type(threshold)
    keep = keys > t
    if quota:
        equal = np.flatnonzero(keys == t)
        keep[equal[:quota]] = True
    return keep


def select_top(
    chunks: Callable[[], Iterable[np.ndarray]],
    n: int,
    key_bits: int = 32,
) -> SelectPlan:
    """Plan the selection of the ``n`` largest keys across all chunks.

    ``chunks`` is called once per pass and must yield the same key arrays in
    the same order every time.
    """
    if key_bits % _DIGIT_BITS:
        raise ValueError("key_bits must be a multiple of 16")
    sizes = [k.size for k in chunks()]
    total = sum(sizes)
    n = max(0, int(n))
    if n == 0 or total == 0:
        return SelectPlan(None, (0,) * len(sizes), (0,) * len(sizes))
    if n >= total:
        return SelectPlan(-1, (0,) * len(sizes), tuple(sizes))

    prefix = 0
    remaining = n
    for level in range(key_bits // _DIGIT_BITS):
        shift = key_bits - _DIGIT_BITS * (level + 1)
        hist = np.zeros(1 << _DIGIT_BITS, dtype=np.int64)
        for keys in chunks():
            keys = keys.reshape(-1)
            if level:
                keys = keys[(keys >> keys.dtype.type(shift + _DIGIT_BITS)) == prefix]
            digits = (keys >> keys.dtype.type(shift)) & keys.dtype.type(_DIGIT_MASK)
            hist += np.bincount(digits.astype(np.intp), minlength=1 << _DIGIT_BITS)
        # count of keys strictly above each digit within the current prefix
        above = hist.sum() - np.cumsum(hist)
        digit = int(np.flatnonzero((above < remaining) & (above + hist >= remaining))[-1])
        remaining -= int(above[digit])
        prefix = (prefix << _DIGIT_BITS) | digit

    threshold = prefix
    quotas, kept = [], []
    for keys in chunks():
        keys = keys.reshape(-1)
        t = keys.dtype.type(threshold)
        greater = int(np.count_nonzero(keys > t))
        quota = min(int(np.count_nonzero(keys == t)), remaining)
        remaining -= quota
        quotas.append(quota)
        kept.append(greater + quota)
    return SelectPlan(threshold, tuple(quotas), tuple(kept))


def top_mask(keys: np.ndarray, n: int, key_bits: int = 32) -> np.ndarray:
    """Single-array convenience: boolean mask of the ``n`` largest keys."""
    plan = select_top(lambda: [keys], n, key_bits)
    return plan.mask(0, keys)
