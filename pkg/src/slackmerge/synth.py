"""Deterministic synthetic checkpoints.

Every value is a pure function of ``(seed, tensor name, flat index)``: element
``i`` of a tensor is the ``(i + 1)``-th output of a SplitMix64 sequence whose
initial state is ``seed ^ fnv1a64(name) ^ salt``. Generation order therefore
does not matter, and files are byte-identical across runs and platforms.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ValidationError
from .select import select_top
from .tensorio import Checkpoint, element_size, from_f32

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# stream salts so value, dropout and flip streams never coincide
SALT_VALUES = 0
SALT_DARE = 0x44415245_00000000
SALT_FLIP = 0x464C4950_00000000
SALT_DELTA = 0x44454C54_00000000


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def stream_key(seed: int, name: str, salt: int = SALT_VALUES) -> int:
    return (int(seed) ^ fnv1a64(name) ^ salt) & MASK64


def splitmix64(key: int, index: np.ndarray) -> np.ndarray:
    """Outputs ``index + 1`` of the SplitMix64 sequence started at ``key``."""
    index = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key) + (index + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def keyed_bits(seed: int, name: str, n: int, salt: int = SALT_VALUES) -> np.ndarray:
    return splitmix64(stream_key(seed, name, salt), np.arange(n, dtype=np.uint64))


def bits_to_signed_unit(bits: np.ndarray) -> np.ndarray:
    """Top 23 bits -> odd multiples of 2**-23 minus one: exact, nonzero, in (-1, 1)."""
    m = (bits >> np.uint64(41)).astype(np.float64)
    return ((2.0 * m + 1.0) * 2.0**-23 - 1.0).astype(np.float32)


def bits_to_unit(bits: np.ndarray) -> np.ndarray:
    """Top 53 bits -> float64 uniform on [0, 1)."""
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    dtype: str = "F32"


@dataclass
class SynthSpec:
    """What to generate.

    ``distribution`` is ``"uniform"`` (values in (-1, 1)) or ``"constant"``
    (every value equals ``constant``). With ``conflict_reference`` set, the
    generated magnitudes take the reference's signs, except on exactly
    ``round(conflict_fraction * numel)`` positions where the sign is flipped.
    """

    seed: int
    tensors: list[TensorSpec]
    distribution: str = "uniform"
    constant: float = 0.0
    conflict_fraction: float = 0.0
    conflict_reference: Checkpoint | None = field(default=None, repr=False)

    def __post_init__(self):
        self.tensors = [
            t if isinstance(t, TensorSpec) else TensorSpec(t[0], tuple(t[1]), *t[2:])
            for t in self.tensors
        ]
        self.tensors = [replace(t, shape=tuple(int(s) for s in t.shape)) for t in self.tensors]
        validate_synth_spec(self)

    @classmethod
    def from_dict(cls, doc: Mapping, reference: Checkpoint | None = None) -> SynthSpec:
        known = {"seed", "tensors", "distribution", "constant", "conflict"}
        unknown = set(doc) - known - {"ct_series"}
        if unknown:
            raise ValidationError(f"unknown synth spec keys: {sorted(unknown)}")
        if "seed" not in doc or "tensors" not in doc:
            raise ValidationError("synth spec requires 'seed' and 'tensors'")
        conflict = doc.get("conflict") or {}
        tensors = [
            TensorSpec(t["name"], tuple(t["shape"]), t.get("dtype", "F32")) for t in doc["tensors"]
        ]
        return cls(
            seed=int(doc["seed"]),
            tensors=tensors,
            distribution=doc.get("distribution", "uniform"),
            constant=float(doc.get("constant", 0.0)),
            conflict_fraction=float(conflict.get("fraction", 0.0)),
            conflict_reference=reference,
        )


def validate_synth_spec(spec: SynthSpec) -> None:
    if not 0 <= spec.seed <= MASK64:
        raise ValidationError("seed must be an unsigned 64-bit integer")
    names = [t.name for t in spec.tensors]
    if len(set(names)) != len(names):
        raise ValidationError("tensor names must be unique")
    for t in spec.tensors:
        element_size(t.dtype)
        if any(s < 0 for s in t.shape):
            raise ValidationError(f"negative dimension in {t.name!r}")
    if spec.distribution not in ("uniform", "constant"):
        raise ValidationError(f"unknown distribution {spec.distribution!r}")
    if not 0.0 <= spec.conflict_fraction <= 1.0:
        raise ValidationError("conflict fraction must lie in [0, 1]")
    ref = spec.conflict_reference
    if ref is not None:
        for t in spec.tensors:
            if t.name not in ref or ref.shape(t.name) != t.shape:
                raise ValidationError(f"conflict reference lacks a matching tensor {t.name!r}")


def _flip_plan(spec: SynthSpec):
    sizes = [int(np.prod(t.shape)) for t in spec.tensors]
    n_flip = round(spec.conflict_fraction * sum(sizes))
    ordered = sorted(range(len(spec.tensors)), key=lambda i: spec.tensors[i].name)

    def chunks():
        for i in ordered:
            t = spec.tensors[i]
            yield keyed_bits(spec.seed, t.name, sizes[i], SALT_FLIP)

    plan = select_top(chunks, n_flip, key_bits=64)
    return {spec.tensors[i].name: pos for pos, i in enumerate(ordered)}, plan


def _values(spec: SynthSpec, t: TensorSpec, flips) -> np.ndarray:
    n = int(np.prod(t.shape))
    if spec.distribution == "constant":
        vals = np.full(n, spec.constant, dtype=np.float32)
    else:
        vals = bits_to_signed_unit(keyed_bits(spec.seed, t.name, n))
    if spec.conflict_reference is not None:
        ref = spec.conflict_reference.f32(t.name).reshape(-1)
        sign = np.where(np.signbit(ref), np.float32(-1), np.float32(1))
        if flips is not None:
            index, plan = flips
            flip_keys = keyed_bits(spec.seed, t.name, n, SALT_FLIP)
            flipped = plan.mask(index[t.name], flip_keys)
            sign = np.where(flipped, -sign, sign)
        vals = np.abs(vals) * sign
    return vals.reshape(t.shape)


def generate_checkpoint(spec: SynthSpec) -> Checkpoint:
    """Lazily generated checkpoint; values materialize when read or written."""
    validate_synth_spec(spec)
    flips = _flip_plan(spec) if spec.conflict_reference is not None else None
    ckpt = Checkpoint()
    for t in spec.tensors:
        ckpt.add(
            t.name,
            t.dtype,
            t.shape,
            lambda t=t: from_f32(_values(spec, t, flips), t.dtype),
        )
    return ckpt


def generate_ct_series(
    spec: SynthSpec,
    steps: int,
    growth: float,
    delta_spec: SynthSpec | None = None,
) -> list[Checkpoint]:
    """Checkpoints ``base + growth * i * delta`` for ``i = 1..steps``.

    ``base`` comes from ``spec``; ``delta`` from ``delta_spec`` or, by default,
    from a uniform stream keyed off ``spec.seed``. Arithmetic is float32 and
    each result is narrowed to the base tensor's dtype.
    """
    if int(steps) != steps or steps < 1:
        raise ValidationError("steps must be a positive integer")
    if not np.isfinite(growth) or growth < 0:
        raise ValidationError("growth must be finite and non-negative")
    base = generate_checkpoint(spec)
    if delta_spec is None:
        delta_spec = SynthSpec(
            seed=stream_key(spec.seed, "", SALT_DELTA),
            tensors=[TensorSpec(t.name, t.shape, "F32") for t in spec.tensors],
        )
    delta = generate_checkpoint(delta_spec)
    for name in base.names:
        if name not in delta or delta.shape(name) != base.shape(name):
            raise ValidationError(f"delta spec does not match base tensor {name!r}")

    series = []
    for i in range(1, int(steps) + 1):
        coeff = np.float32(growth * i)
        ckpt = Checkpoint()
        for name in base.names:
            dtype = base.dtype(name)

            def payload(name=name, dtype=dtype, coeff=coeff):
                return from_f32(base.f32(name) + coeff * delta.f32(name), dtype)

            ckpt.add(name, dtype, base.shape(name), payload)
        series.append(ckpt)
    return series


def tensor_specs(shapes: Mapping[str, Sequence[int]], dtype: str = "F32") -> list[TensorSpec]:
    return [TensorSpec(name, tuple(shape), dtype) for name, shape in shapes.items()]
