"""Reading and writing single-file tensor containers.

Layout: an unsigned 64-bit little-endian header length ``N``, then ``N`` bytes
of UTF-8 JSON mapping tensor names to ``{"dtype", "shape", "data_offsets"}``
(plus an optional ``"__metadata__"`` string map), then the data region.
Offsets are relative to the start of the data region.

Serialization is canonical: names sorted by code point, no whitespace, fixed
field order, tensors packed contiguously in name order. Identical logical
content therefore always yields identical bytes, and the fingerprint of a
checkpoint is simply the SHA-256 of those bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections.abc import Callable, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import prod

import numpy as np

from .exceptions import CheckpointFormatError, ValidationError

__all__ = [
    "DTYPES",
    "TensorMeta",
    "Checkpoint",
    "read_checkpoint",
    "write_checkpoint",
    "serialize",
    "deserialize",
    "to_f32",
    "from_f32",
    "element_size",
]

# storage dtype string -> little-endian numpy dtype holding the raw bits
_STORAGE = {
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
}
DTYPES = tuple(_STORAGE)
_METADATA_KEY = "__metadata__"


def element_size(dtype: str) -> int:
    try:
        return _STORAGE[dtype].itemsize
    except KeyError:
        raise ValidationError(f"unsupported dtype {dtype!r}; expected one of {DTYPES}") from None


def storage_dtype(dtype: str) -> np.dtype:
    element_size(dtype)
    return _STORAGE[dtype]


def to_f32(buffer, dtype: str) -> np.ndarray:
    """Widen a raw buffer (bytes or array of storage bits) to float32.

    The conversion is exact for every input, including infinities and NaNs.
    The result is a flat array; callers reshape as needed.
    """
    size = element_size(dtype)
    if isinstance(buffer, np.ndarray):
        raw = np.ascontiguousarray(buffer).reshape(-1).view(np.uint8)
    else:
        raw = np.frombuffer(memoryview(buffer), dtype=np.uint8)
    if raw.size % size:
        raise ValidationError(
            f"buffer of {raw.size} bytes is not a multiple of the {dtype} element size {size}"
        )
    if dtype == "F32":
        return raw.view("<f4").astype(np.float32)
    if dtype == "F16":
        return raw.view("<f2").astype(np.float32)
    bits = raw.view("<u2").astype(np.uint32) << np.uint32(16)
    return bits.view(np.float32)


def from_f32(values: np.ndarray, dtype: str) -> np.ndarray:
    """Narrow float32 values to the storage representation of ``dtype``.

    F16 and BF16 use round-to-nearest-even. BF16 results are returned as
    ``uint16`` bit patterns since numpy has no native bfloat16.
    """
    values = np.asarray(values, dtype=np.float32)
    if dtype == "F32":
        return values.astype("<f4", copy=False)
    if dtype == "F16":
        with np.errstate(over="ignore"):
            return values.astype("<f2")
    element_size(dtype)
    bits = values.view(np.uint32)
    rounding = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    out = ((bits + rounding) >> np.uint32(16)).astype("<u2")
    nan = np.isnan(values)
    if nan.any():
        # keep NaNs quiet; plain rounding could carry a NaN payload into inf
        out[nan] = ((bits[nan] >> np.uint32(16)) | np.uint32(0x0040)).astype("<u2")
    return out


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    data_offsets: tuple[int, int]

    @property
    def numel(self) -> int:
        return prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


# A tensor's payload is either a storage-typed array or a zero-argument
# callable producing one. Callables let large outputs stream to disk one
# tensor at a time.
Payload = np.ndarray | Callable[[], np.ndarray]


class Checkpoint:
    """Ordered collection of named tensors plus a string metadata map.

    Payloads are kept in their storage dtype. Arithmetic should go through
    :meth:`f32`. Payloads may be lazy (callables); they are re-evaluated on
    every access and never cached, which keeps memory bounded when streaming.
    """

    def __init__(self, metadata: Mapping[str, str] | None = None):
        self._entries: dict[str, tuple[str, tuple[int, ...], Payload]] = {}
        self.metadata: dict[str, str] = dict(metadata or {})
        self._fingerprint: str | None = None
        self.source: str | None = None

    @classmethod
    def from_arrays(
        cls,
        arrays: Mapping[str, np.ndarray],
        dtype: str | None = None,
        metadata: Mapping[str, str] | None = None,
    ) -> Checkpoint:
        """Build a checkpoint from float arrays, narrowing to ``dtype``.

        With ``dtype=None`` float16 arrays are stored as F16 and everything
        else as F32.
        """
        ckpt = cls(metadata)
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dt = dtype or ("F16" if arr.dtype == np.float16 else "F32")
            ckpt.add(name, dt, arr.shape, from_f32(arr.astype(np.float32), dt))
        return ckpt

    def add(self, name: str, dtype: str, shape, data: Payload) -> None:
        if not isinstance(name, str) or name == _METADATA_KEY:
            raise ValidationError(f"invalid tensor name {name!r}")
        if name in self._entries:
            raise ValidationError(f"duplicate tensor name {name!r}")
        element_size(dtype)
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ValidationError(f"negative dimension in shape {shape} of {name!r}")
        if isinstance(data, np.ndarray):
            self._check_payload(name, dtype, shape, data)
        self._entries[name] = (dtype, shape, data)
        self._fingerprint = None

    @staticmethod
    def _check_payload(name, dtype, shape, data: np.ndarray) -> None:
        expected = element_size(dtype) * prod(shape)
        if data.nbytes != expected:
            raise ValidationError(
                f"tensor {name!r}: buffer holds {data.nbytes} bytes, metadata requires {expected}"
            )

    # -- mapping-ish access -------------------------------------------------

    @property
    def names(self) -> list[str]:
        return sorted(self._entries)

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names)

    def dtype(self, name: str) -> str:
        return self._entries[name][0]

    def shape(self, name: str) -> tuple[int, ...]:
        return self._entries[name][1]

    def numel(self, name: str) -> int:
        return prod(self._entries[name][1])

    @property
    def numel_total(self) -> int:
        return sum(prod(shape) for _, shape, _ in self._entries.values())

    @property
    def nbytes(self) -> int:
        return sum(element_size(dt) * prod(shape) for dt, shape, _ in self._entries.values())

    def raw(self, name: str) -> np.ndarray:
        """Storage-typed payload, shaped. BF16 comes back as ``uint16`` bits."""
        dtype, shape, data = self._entries[name]
        if callable(data):
            data = np.asarray(data())
            self._check_payload(name, dtype, shape, data)
        return data.reshape(-1).view(_STORAGE[dtype]).reshape(shape)

    def f32(self, name: str) -> np.ndarray:
        return to_f32(self.raw(name), self.dtype(name)).reshape(self.shape(name))

    def metas(self) -> list[TensorMeta]:
        """Tensor metadata with offsets as laid out by canonical serialization."""
        out, offset = [], 0
        for name in self.names:
            dtype, shape, _ = self._entries[name]
            size = element_size(dtype) * prod(shape)
            out.append(TensorMeta(name, dtype, shape, (offset, offset + size)))
            offset += size
        return out

    def meta(self, name: str) -> TensorMeta:
        for m in self.metas():
            if m.name == name:
                return m
        raise KeyError(name)

    def structure(self) -> dict[str, tuple[int, ...]]:
        return {name: self.shape(name) for name in self.names}

    @property
    def fingerprint(self) -> str:
        """SHA-256 hex digest of the canonical serialization."""
        if self._fingerprint is None:
            digest = hashlib.sha256()
            for chunk in _iter_serialized(self):
                digest.update(chunk)
            self._fingerprint = digest.hexdigest()
        return self._fingerprint

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or self.names != other.names:
            return False
        for name in self.names:
            if self.dtype(name) != other.dtype(name) or self.shape(name) != other.shape(name):
                return False
            a = self.raw(name).reshape(-1).view(np.uint8)
            b = other.raw(name).reshape(-1).view(np.uint8)
            if not np.array_equal(a, b):
                return False
        return True

    __hash__ = None

    def __repr__(self) -> str:
        return f"Checkpoint({len(self)} tensors, {self.numel_total} parameters)"


# -- serialization ----------------------------------------------------------


def _header_bytes(ckpt: Checkpoint) -> bytes:
    header: dict = {}
    if ckpt.metadata:
        header[_METADATA_KEY] = {k: ckpt.metadata[k] for k in sorted(ckpt.metadata)}
    for m in ckpt.metas():
        header[m.name] = {
            "dtype": m.dtype,
            "shape": list(m.shape),
            "data_offsets": list(m.data_offsets),
        }
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _payload_bytes(ckpt: Checkpoint, name: str) -> memoryview:
    return memoryview(np.ascontiguousarray(ckpt.raw(name)).reshape(-1).view(np.uint8))


def _iter_serialized(ckpt: Checkpoint, threads: int = 1) -> Iterator:
    header = _header_bytes(ckpt)
    yield struct.pack("<Q", len(header))
    yield header
    names = ckpt.names
    if threads <= 1:
        for name in names:
            yield _payload_bytes(ckpt, name)
        return
    # bounded look-ahead: at most `threads` payloads in flight, emitted in order
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending = []
        it = iter(names)
        for name in it:
            pending.append(pool.submit(_payload_bytes, ckpt, name))
            if len(pending) >= threads:
                break
        while pending:
            chunk = pending.pop(0).result()
            nxt = next(it, None)
            if nxt is not None:
                pending.append(pool.submit(_payload_bytes, ckpt, nxt))
            yield chunk


def serialize(ckpt: Checkpoint) -> bytes:
    return b"".join(bytes(chunk) for chunk in _iter_serialized(ckpt))


def write_checkpoint(ckpt: Checkpoint, path, threads: int = 1) -> str:
    """Write the canonical serialization of ``ckpt`` to ``path``.

    Lazy payloads are evaluated here, up to ``threads`` at a time. The file
    is written to a temporary sibling and renamed into place. Returns the
    fingerprint of the written bytes.
    """
    path = os.fspath(path)
    tmp = f"{path}.tmp-{os.getpid()}"
    digest = hashlib.sha256()
    try:
        with open(tmp, "wb") as fh:
            for chunk in _iter_serialized(ckpt, threads=threads):
                digest.update(chunk)
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return digest.hexdigest()


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise CheckpointFormatError(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def _parse_header(raw: bytes) -> tuple[dict[str, str], list[TensorMeta]]:
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except CheckpointFormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict):
        raise CheckpointFormatError("header must be a JSON object")

    metadata = header.pop(_METADATA_KEY, None) or {}
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise CheckpointFormatError("__metadata__ must map strings to strings")

    metas = []
    for name, entry in header.items():
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise CheckpointFormatError(f"malformed entry for tensor {name!r}")
        dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
        if dtype not in _STORAGE:
            raise CheckpointFormatError(f"unknown dtype {dtype!r} for tensor {name!r}")
        if not isinstance(shape, list) or not all(
            isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
        ):
            raise CheckpointFormatError(f"invalid shape {shape!r} for tensor {name!r}")
        if (
            not isinstance(offsets, list)
            or len(offsets) != 2
            or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
            or not 0 <= offsets[0] <= offsets[1]
        ):
            raise CheckpointFormatError(f"invalid data_offsets {offsets!r} for tensor {name!r}")
        meta = TensorMeta(name, dtype, tuple(shape), (offsets[0], offsets[1]))
        if meta.nbytes != element_size(dtype) * meta.numel:
            raise CheckpointFormatError(
                f"tensor {name!r}: data_offsets span {meta.nbytes} bytes, "
                f"dtype and shape require {element_size(dtype) * meta.numel}"
            )
        metas.append(meta)

    spans = sorted((m.data_offsets, m.name) for m in metas if m.nbytes)
    for (prev, prev_name), (cur, cur_name) in zip(spans, spans[1:]):
        if cur[0] < prev[1]:
            raise CheckpointFormatError(f"tensors {prev_name!r} and {cur_name!r} overlap")
    return metadata, metas


def _from_buffer(data, size: int, metadata, metas) -> Checkpoint:
    end = max((m.data_offsets[1] for m in metas), default=0)
    if end > size:
        raise CheckpointFormatError(
            f"truncated file: data region holds {size} bytes, tensors need {end}"
        )
    ckpt = Checkpoint(metadata)
    for m in metas:
        begin, stop = m.data_offsets
        ckpt.add(m.name, m.dtype, m.shape, data[begin:stop])
    return ckpt


def read_checkpoint(path, mmap: bool = True) -> Checkpoint:
    """Parse a checkpoint file.

    With ``mmap=True`` tensor payloads are memory-mapped views and only paged
    in when touched; the values are identical to an eager read.
    """
    path = os.fspath(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise CheckpointFormatError("truncated file: missing header length")
        (n,) = struct.unpack("<Q", prefix)
        if n > size - 8:
            raise CheckpointFormatError(
                f"truncated file: header length {n} exceeds remaining {size - 8} bytes"
            )
        metadata, metas = _parse_header(fh.read(n))
        data_size = size - 8 - n
        if mmap and data_size > 0:
            data = np.memmap(path, dtype=np.uint8, mode="r", offset=8 + n, shape=(data_size,))
        else:
            data = np.frombuffer(fh.read(), dtype=np.uint8)
    ckpt = _from_buffer(data, data_size, metadata, metas)
    ckpt.source = path
    return ckpt


def deserialize(blob: bytes) -> Checkpoint:
    if len(blob) < 8:
        raise CheckpointFormatError("truncated file: missing header length")
    (n,) = struct.unpack("<Q", blob[:8])
    if n > len(blob) - 8:
        raise CheckpointFormatError(
            f"truncated file: header length {n} exceeds remaining {len(blob) - 8} bytes"
        )
    metadata, metas = _parse_header(blob[8 : 8 + n])
    data = np.frombuffer(blob, dtype=np.uint8, offset=8 + n)
    return _from_buffer(data, data.size, metadata, metas)
