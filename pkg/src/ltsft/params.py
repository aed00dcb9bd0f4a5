"""Parameter snapshots, masks and sparse difference vectors.

Everything here is stored flat: a snapshot is one contiguous float32 vector
plus a :class:`Layout` describing the named tensors packed into it
(lexicographic by name, row-major within each tensor). Masks and diffs share
the same flat index space, so "flat parameter order" means the same thing
everywhere in the package.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

SFT_MAGIC = b"SFT1"
SNAPSHOT_MAGIC = b"SNP1"
MASK_MAGIC = b"MSK1"

_U32 = struct.Struct("<I")
_MAX_INDEX = 2**32 - 1


class FingerprintMismatch(ValueError):
    """Raised when two parameter layouts disagree."""

    def __init__(self, expected: str, got: str, what: str = "parameters"):
        super().__init__(f"fingerprint mismatch for {what}: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


class DecodeError(ValueError):
    """Raised for any malformed artifact payload."""


class UnrepresentableDiff(ValueError):
    """No float32 delta reproduces the target value from the base value."""


def fingerprint_of(entries: Iterable[tuple[str, Sequence[int]]]) -> str:
    records = "".join(f"{name}:{','.join(str(int(d)) for d in shape)};" for name, shape in entries)
    return hashlib.sha256(records.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape) records and their offsets in the flat vector."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    offsets: tuple[int, ...] = field(init=False, repr=False)
    total: int = field(init=False)
    fingerprint: str = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if list(self.names) != sorted(self.names):
            raise ValueError("layout names must be in lexicographic order")
        if len(set(self.names)) != len(self.names):
            raise ValueError("layout names must be unique")
        if len(self.names) != len(self.shapes):
            raise ValueError("names and shapes differ in length")
        offsets = [0]
        for name, shape in zip(self.names, self.shapes):
            if not shape or any(int(d) < 1 for d in shape):
                raise ValueError(f"tensor {name!r} needs a shape of positive integers, got {shape}")
            offsets.append(offsets[-1] + int(np.prod(shape)))
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "total", offsets[-1])
        object.__setattr__(self, "fingerprint", fingerprint_of(zip(self.names, self.shapes)))

    @classmethod
    def from_shapes(cls, shapes: Mapping[str, Sequence[int]]) -> "Layout":
        names = tuple(sorted(shapes))
        return cls(names, tuple(tuple(int(d) for d in shapes[n]) for n in names))

    def __len__(self) -> int:
        return len(self.names)

    def size(self, name: str) -> int:
        i = self.names.index(name)
        return self.offsets[i + 1] - self.offsets[i]

    def span(self, name: str) -> slice:
        i = self.names.index(name)
        return slice(self.offsets[i], self.offsets[i + 1])

    def spans(self) -> Iterator[tuple[str, tuple[int, ...], slice]]:
        for i, name in enumerate(self.names):
            yield name, self.shapes[i], slice(self.offsets[i], self.offsets[i + 1])

    def locate(self, flat_index: int) -> tuple[str, int]:
        """Map a flat index to (tensor name, index within that tensor)."""
        i = int(np.searchsorted(self.offsets, flat_index, side="right")) - 1
        if not 0 <= flat_index < self.total:
            raise IndexError(flat_index)
        return self.names[i], flat_index - self.offsets[i]

    def check(self, other: "Layout", what: str = "parameters") -> None:
        if other.fingerprint != self.fingerprint:
            raise FingerprintMismatch(self.fingerprint, other.fingerprint, what)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class ParameterSnapshot:
    """Immutable, ordered, named collection of dense float32 tensors."""

    __slots__ = ("layout", "values")

    def __init__(self, layout: Layout, values: np.ndarray):
        values = np.ascontiguousarray(values, dtype=np.float32)
        if values.shape != (layout.total,):
            raise ValueError(f"expected {layout.total} values, got shape {values.shape}")
        if values.flags.writeable:
            values = values.copy()
        self.layout = layout
        self.values = _frozen(values)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParameterSnapshot":
        layout = Layout.from_shapes({k: np.shape(v) for k, v in arrays.items()})
        flat = np.empty(layout.total, dtype=np.float32)
        for name, _, sl in layout.spans():
            flat[sl] = np.asarray(arrays[name], dtype=np.float32).ravel()
        return cls(layout, flat)

    @property
    def fingerprint(self) -> str:
        return self.layout.fingerprint

    @property
    def names(self) -> tuple[str, ...]:
        return self.layout.names

    def __len__(self) -> int:
        return self.layout.total

    def __getitem__(self, name: str) -> np.ndarray:
        i = self.layout.names.index(name)
        return self.values[self.layout.span(name)].reshape(self.layout.shapes[i])

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.layout.names:
            yield name, self[name]

    def to_dict(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.items()}

    def replace(self, values: np.ndarray) -> "ParameterSnapshot":
        return ParameterSnapshot(self.layout, values)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSnapshot):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self) -> int:
        return hash((self.fingerprint, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"ParameterSnapshot({len(self.layout)} tensors, {self.layout.total} params)"


class SparseDiff:
    """Sparse vector of deltas in the flat index space of a layout.

    ``indices`` are strictly ascending flat indices, ``deltas`` the matching
    non-zero float32 values.
    """

    __slots__ = ("layout", "indices", "deltas", "meta")

    def __init__(self, layout: Layout, indices, deltas, meta: Mapping | None = None):
        idx = np.ascontiguousarray(indices, dtype=np.int64)
        val = np.ascontiguousarray(deltas, dtype=np.float32)
        if idx.ndim != 1 or idx.shape != val.shape:
            raise ValueError("indices and deltas must be 1-d and of equal length")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= layout.total:
                raise IndexError("diff index out of range for layout")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("diff indices must be strictly ascending")
            if np.any(val == 0):
                raise ValueError("zero-valued deltas must not be stored")
            if not np.all(np.isfinite(val)):
                raise ValueError("non-finite delta")
        self.layout = layout
        self.indices = _frozen(idx.copy() if idx.flags.writeable else idx)
        self.deltas = _frozen(val.copy() if val.flags.writeable else val)
        self.meta = dict(meta or {})

    @classmethod
    def empty(cls, layout: Layout, meta: Mapping | None = None) -> "SparseDiff":
        return cls(layout, np.zeros(0, np.int64), np.zeros(0, np.float32), meta)

    @classmethod
    def from_dense(cls, layout: Layout, dense: np.ndarray, meta: Mapping | None = None) -> "SparseDiff":
        dense = np.asarray(dense, dtype=np.float32)
        idx = np.flatnonzero(dense)
        return cls(layout, idx, dense[idx], meta)

    @property
    def fingerprint(self) -> str:
        return self.layout.fingerprint

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.layout.total, dtype=np.float32)
        out[self.indices] = self.deltas
        return out

    def support(self) -> "Mask":
        bits = np.zeros(self.layout.total, dtype=bool)
        bits[self.indices] = True
        return Mask(self.layout, bits)

    def per_tensor(self) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
        """Yield (name, local indices, deltas) for every tensor in layout order."""
        cuts = np.searchsorted(self.indices, self.layout.offsets)
        for i, name in enumerate(self.layout.names):
            lo, hi = cuts[i], cuts[i + 1]
            yield name, self.indices[lo:hi] - self.layout.offsets[i], self.deltas[lo:hi]

    def with_meta(self, **meta) -> "SparseDiff":
        return SparseDiff(self.layout, self.indices, self.deltas, {**self.meta, **meta})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseDiff):
            return NotImplemented
        return (
            self.fingerprint == other.fingerprint
            and np.array_equal(self.indices, other.indices)
            and self.deltas.tobytes() == other.deltas.tobytes()
        )

    def __repr__(self) -> str:
        return f"SparseDiff(nnz={self.nnz}, total={self.layout.total})"


class Mask:
    """Binary indicator over the flat parameters of a layout."""

    __slots__ = ("layout", "bits")

    def __init__(self, layout: Layout, bits: np.ndarray):
        bits = np.ascontiguousarray(bits, dtype=bool)
        if bits.shape != (layout.total,):
            raise ValueError(f"mask needs {layout.total} bits, got shape {bits.shape}")
        self.layout = layout
        self.bits = _frozen(bits.copy() if bits.flags.writeable else bits)

    @classmethod
    def from_indices(cls, layout: Layout, indices) -> "Mask":
        bits = np.zeros(layout.total, dtype=bool)
        bits[np.asarray(indices, dtype=np.int64)] = True
        return cls(layout, bits)

    @property
    def fingerprint(self) -> str:
        return self.layout.fingerprint

    @property
    def popcount(self) -> int:
        return int(np.count_nonzero(self.bits))

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def __getitem__(self, name: str) -> np.ndarray:
        i = self.layout.names.index(name)
        return self.bits[self.layout.span(name)].reshape(self.layout.shapes[i])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.fingerprint == other.fingerprint and np.array_equal(self.bits, other.bits)

    def __repr__(self) -> str:
        return f"Mask(popcount={self.popcount}, total={self.layout.total})"


@dataclass(frozen=True)
class GroupPolicy:
    """Parameter groups that may never be trained sparsely."""

    excluded_groups: frozenset[str] = frozenset({"output-embedding", "layer-norm"})

    def maskable(self, layout: Layout, tags: Mapping[str, str]) -> Mask:
        bits = np.zeros(layout.total, dtype=bool)
        for name, _, sl in layout.spans():
            if tags[name] not in self.excluded_groups:
                bits[sl] = True
        return Mask(layout, bits)


NO_EXCLUSIONS = GroupPolicy(frozenset())


# ---------------------------------------------------------------------------
# Arithmetic


def dense_sum(base: ParameterSnapshot, diffs: Sequence[SparseDiff] = ()) -> np.ndarray:
    """``base + sum(diffs)`` accumulated in float64 (not rounded)."""
    acc = base.values.astype(np.float64)
    for d in diffs:
        base.layout.check(d.layout, "diff")
        acc[d.indices] += d.deltas.astype(np.float64)
    return acc


def apply_diffs(base: ParameterSnapshot, diffs: Sequence[SparseDiff] = ()) -> ParameterSnapshot:
    if not diffs:
        return base
    return base.replace(dense_sum(base, diffs).astype(np.float32))


def canonical_delta(target: np.ndarray, base: np.ndarray, exact: bool = True) -> np.ndarray:
    """Per-coordinate float32 ``d`` with ``float32(base + d) == target``.

    ``base`` may be float64 (an un-rounded composition). The returned delta is
    the float32 nearest to ``target - base``, nudged by a few ulps when that
    lands on a rounding boundary, and exactly 0 wherever ``target`` already
    equals ``float32(base)``.
    """
    target = np.asarray(target, dtype=np.float32)
    base = np.asarray(base, dtype=np.float64)
    d = (target.astype(np.float64) - base).astype(np.float32)
    d[base.astype(np.float32) == target] = 0
    bad = np.flatnonzero((base + d).astype(np.float32) != target)
    if bad.size:
        t, b = target[bad], base[bad]
        fixed = np.zeros(bad.size, dtype=bool)
        for direction in (np.float32(np.inf), np.float32(-np.inf)):
            cand = d[bad].copy()
            for _ in range(4):
                cand = np.nextafter(cand, direction)
                hit = ~fixed & ((b + cand).astype(np.float32) == t)
                d[bad[hit]] = cand[hit]
                fixed |= hit
        if not fixed.all():
            if exact:
                raise UnrepresentableDiff(
                    f"{int((~fixed).sum())} coordinates cannot be reached with a float32 delta "
                    f"(first flat index {int(bad[~fixed][0])})"
                )
    return d


def extract_diff(
    after: ParameterSnapshot, before: ParameterSnapshot, meta: Mapping | None = None
) -> SparseDiff:
    """Sparse ``after - before`` such that ``apply_diffs(before, [diff]) == after``."""
    if after.fingerprint != before.fingerprint:
        raise FingerprintMismatch(before.fingerprint, after.fingerprint, "extract_diff")
    d = canonical_delta(after.values, before.values)
    return SparseDiff.from_dense(before.layout, d, meta)


def diff_density(diff: SparseDiff, total_params: int | None = None) -> float:
    total = diff.layout.total if total_params is None else int(total_params)
    if total <= 0:
        raise ValueError("total_params must be positive")
    return diff.nnz / total


def overlap_percentage(a: Mask, b: Mask) -> float:
    if a.fingerprint != b.fingerprint:
        raise FingerprintMismatch(a.fingerprint, b.fingerprint, "mask overlap")
    k = a.popcount
    if k != b.popcount:
        raise ValueError(f"masks have different budgets: {k} vs {b.popcount}")
    if k == 0:
        raise ValueError("overlap is undefined for empty masks")
    return 100.0 * int(np.count_nonzero(a.bits & b.bits)) / k


# ---------------------------------------------------------------------------
# Containers
#
# magic | u32 manifest length | canonical JSON manifest | per-tensor payload.
# The manifest carries a sha256 over the rest of the manifest plus the payload,
# so a flipped byte anywhere, metadata included, is a decode error rather than
# a silently different artifact.


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


_DIGEST = "sha256"


def _digest(manifest: dict, payload: bytes) -> str:
    body = {k: v for k, v in manifest.items() if k != _DIGEST}
    return hashlib.sha256(_canonical_json(body) + payload).hexdigest()


def _pack(magic: bytes, manifest: dict, payload: bytes) -> bytes:
    manifest = {**manifest, _DIGEST: _digest(manifest, payload)}
    head = _canonical_json(manifest)
    return magic + _U32.pack(len(head)) + head + payload


def _unpack(data: bytes, magic: bytes) -> tuple[dict, memoryview, Layout]:
    data = bytes(data)
    if len(data) < 8:
        raise DecodeError("truncated header")
    if data[:4] != magic:
        raise DecodeError(f"bad magic {data[:4]!r}, expected {magic!r}")
    (n,) = _U32.unpack_from(data, 4)
    if 8 + n > len(data):
        raise DecodeError("truncated manifest")
    raw = data[8 : 8 + n]
    try:
        manifest = json.loads(raw.decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"unreadable manifest: {exc}") from None
    if not isinstance(manifest, dict) or _canonical_json(manifest) != raw:
        raise DecodeError("manifest is not canonical JSON")
    payload = data[8 + n :]
    if manifest.get(_DIGEST) != _digest(manifest, payload):
        raise DecodeError("checksum mismatch (corrupt or truncated artifact)")
    try:
        tensors = manifest["tensors"]
        layout = Layout(
            tuple(str(t["name"]) for t in tensors),
            tuple(tuple(int(d) for d in t["shape"]) for t in tensors),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"bad tensor table: {exc}") from None
    if manifest.get("fingerprint") != layout.fingerprint:
        raise DecodeError("manifest fingerprint does not match its tensor table")
    if manifest.get("total_params") != layout.total:
        raise DecodeError("manifest total_params does not match its tensor table")
    return manifest, memoryview(payload), layout


def _tensor_table(layout: Layout, counts: Sequence[int] | None = None) -> list[dict]:
    table = []
    for i, (name, shape) in enumerate(zip(layout.names, layout.shapes)):
        row = {"name": name, "shape": list(shape)}
        if counts is not None:
            row["count"] = int(counts[i])
        table.append(row)
    return table


def _sparse_payload(layout: Layout, indices: np.ndarray, values: np.ndarray | None) -> tuple[bytes, list[int]]:
    cuts = np.searchsorted(indices, layout.offsets)
    parts, counts = [], []
    for i in range(len(layout)):
        lo, hi = int(cuts[i]), int(cuts[i + 1])
        local = indices[lo:hi] - layout.offsets[i]
        if local.size and local[-1] > _MAX_INDEX:
            raise ValueError("tensor too large for u32 indices")
        counts.append(hi - lo)
        parts.append(_U32.pack(hi - lo))
        parts.append(local.astype("<u4").tobytes())
        if values is not None:
            parts.append(values[lo:hi].astype("<f4").tobytes())
    return b"".join(parts), counts


def _read_sparse_payload(
    payload: memoryview, layout: Layout, counts: Sequence[int], with_values: bool
) -> tuple[np.ndarray, np.ndarray | None]:
    pos = 0
    all_idx, all_val = [], []
    width = 8 if with_values else 4
    for i, name in enumerate(layout.names):
        if pos + 4 > len(payload):
            raise DecodeError(f"truncated count for tensor {name!r}")
        (c,) = _U32.unpack_from(payload, pos)
        pos += 4
        if c != counts[i]:
            raise DecodeError(f"count for tensor {name!r} disagrees with manifest")
        if pos + width * c > len(payload):
            raise DecodeError(f"truncated entries for tensor {name!r}")
        idx = np.frombuffer(payload, dtype="<u4", count=c, offset=pos).astype(np.int64)
        pos += 4 * c
        size = layout.offsets[i + 1] - layout.offsets[i]
        if c and (np.any(np.diff(idx) <= 0) or idx[-1] >= size):
            raise DecodeError(f"indices for tensor {name!r} are not strictly ascending within bounds")
        all_idx.append(idx + layout.offsets[i])
        if with_values:
            val = np.frombuffer(payload, dtype="<f4", count=c, offset=pos).astype(np.float32)
            pos += 4 * c
            if np.any(val == 0) or not np.all(np.isfinite(val)):
                raise DecodeError(f"zero or non-finite delta in tensor {name!r}")
            all_val.append(val)
    if pos != len(payload):
        raise DecodeError("trailing bytes after last tensor")
    idx = np.concatenate(all_idx) if all_idx else np.zeros(0, np.int64)
    val = (np.concatenate(all_val) if all_val else np.zeros(0, np.float32)) if with_values else None
    return idx, val


def serialize_diff(diff: SparseDiff) -> bytes:
    payload, counts = _sparse_payload(diff.layout, diff.indices, diff.deltas)
    manifest = {
        "kind": "sft",
        "fingerprint": diff.fingerprint,
        "total_params": diff.layout.total,
        "tensors": _tensor_table(diff.layout, counts),
        "meta": diff.meta,
    }
    return _pack(SFT_MAGIC, manifest, payload)


def deserialize_diff(data: bytes) -> SparseDiff:
    manifest, payload, layout = _unpack(data, SFT_MAGIC)
    try:
        counts = [int(t["count"]) for t in manifest["tensors"]]
    except (KeyError, TypeError, ValueError):
        raise DecodeError("tensor table lacks entry counts") from None
    idx, val = _read_sparse_payload(payload, layout, counts, with_values=True)
    return SparseDiff(layout, idx, val, manifest.get("meta") or {})


def serialize_mask(mask: Mask, meta: Mapping | None = None) -> bytes:
    idx = mask.indices()
    payload, counts = _sparse_payload(mask.layout, idx, None)
    manifest = {
        "kind": "mask",
        "fingerprint": mask.fingerprint,
        "total_params": mask.layout.total,
        "tensors": _tensor_table(mask.layout, counts),
        "meta": dict(meta or {}),
    }
    return _pack(MASK_MAGIC, manifest, payload)


def deserialize_mask(data: bytes) -> Mask:
    manifest, payload, layout = _unpack(data, MASK_MAGIC)
    try:
        counts = [int(t["count"]) for t in manifest["tensors"]]
    except (KeyError, TypeError, ValueError):
        raise DecodeError("tensor table lacks entry counts") from None
    idx, _ = _read_sparse_payload(payload, layout, counts, with_values=False)
    return Mask.from_indices(layout, idx)


def serialize_snapshot(snap: ParameterSnapshot, meta: Mapping | None = None) -> bytes:
    manifest = {
        "kind": "snapshot",
        "fingerprint": snap.fingerprint,
        "total_params": snap.layout.total,
        "tensors": _tensor_table(snap.layout),
        "meta": dict(meta or {}),
    }
    return _pack(SNAPSHOT_MAGIC, manifest, snap.values.astype("<f4").tobytes())


def deserialize_snapshot(data: bytes) -> ParameterSnapshot:
    _, payload, layout = _unpack(data, SNAPSHOT_MAGIC)
    if len(payload) != 4 * layout.total:
        raise DecodeError("dense payload size does not match tensor table")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise DecodeError("non-finite parameter value")
    return ParameterSnapshot(layout, values)


def read_manifest(data: bytes) -> dict:
    """Manifest of any container without decoding its payload."""
    for magic in (SFT_MAGIC, SNAPSHOT_MAGIC, MASK_MAGIC):
        if bytes(data[:4]) == magic:
            return _unpack(data, magic)[0]
    raise DecodeError(f"unknown magic {bytes(data[:4])!r}")
