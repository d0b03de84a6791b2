"""Ternary knowledge base: (user, item, context) feature keys -> knowledge vectors.

File layout (little-endian)::

    b"D2K1" | u32 version | u32 d_k | u64 entry count | 32-byte schema hash
    entries in key order: 3 x u16 field index, 3 x u32 value id, d_k x f32

Keys order slot by slot: (user field, user value, item field, item value,
context field, context value).
"""
from __future__ import annotations

import hashlib
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import kernels
from .data import Dataset, FeatureSchema
from .errors import ConfigError, FormatError

KB_MAGIC = b"D2K1"
KB_VERSION = 1
HEADER = struct.Struct("<4sIIQ32s")
MAX_VALUE = 0xFFFFFFFF


class TernaryKey(NamedTuple):
    """Within-side field index and value ID for each of the three slots."""

    user_field: int
    user_value: int
    item_field: int
    item_value: int
    context_field: int
    context_value: int

    @classmethod
    def of(cls, fields, values) -> "TernaryKey":
        return cls(int(fields[0]), int(values[0]), int(fields[1]), int(values[1]),
                   int(fields[2]), int(values[2]))

    @property
    def fields(self) -> tuple[int, int, int]:
        return (self.user_field, self.item_field, self.context_field)

    @property
    def values(self) -> tuple[int, int, int]:
        return (self.user_value, self.item_value, self.context_value)


def entry_dtype(d_k: int) -> np.dtype:
    return np.dtype([("f", "<u2", (3,)), ("v", "<u4", (3,)), ("z", "<f4", (d_k,))])


def _key_order(fields: np.ndarray, values: np.ndarray) -> np.ndarray:
    return np.lexsort((values[:, 2], fields[:, 2], values[:, 1], fields[:, 1], values[:, 0], fields[:, 0]))


class KnowledgeBase:
    """Immutable, key-sorted arrays plus a lazily built hash index.

    Vectors are held as float32, the precision of the file format, so that
    save/load round trips are exact.
    """

    def __init__(self, fields: np.ndarray, values: np.ndarray, vectors: np.ndarray, d_k: int,
                 schema_hash: bytes = b"\0" * 32, meta: dict | None = None, *, presorted: bool = False):
        fields = np.ascontiguousarray(fields, dtype=np.uint16).reshape(-1, 3)
        values = np.ascontiguousarray(values, dtype=np.uint32).reshape(-1, 3)
        vectors = np.ascontiguousarray(vectors, dtype=np.float32).reshape(-1, d_k)
        if not (len(fields) == len(values) == len(vectors)):
            raise ConfigError("key and vector arrays differ in length")
        if len(schema_hash) != 32:
            raise ConfigError("schema hash must be 32 bytes")
        if not presorted and len(fields):
            order = _key_order(fields, values)
            fields, values, vectors = fields[order], values[order], vectors[order]
        if len(fields) > 1:
            same = np.all(fields[1:] == fields[:-1], axis=1) & np.all(values[1:] == values[:-1], axis=1)
            if same.any():
                raise ConfigError("duplicate keys in knowledge base")
        for a in (fields, values, vectors):
            a.flags.writeable = False
        self.fields, self.values, self.vectors = fields, values, vectors
        self.d_k = int(d_k)
        self.schema_hash = bytes(schema_hash)
        self.meta = dict(meta or {})
        self._index = {}

    @classmethod
    def empty(cls, d_k: int, schema_hash: bytes = b"\0" * 32) -> "KnowledgeBase":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, d_k)), d_k, schema_hash)

    @classmethod
    def from_dict(cls, entries: dict, d_k: int, schema_hash: bytes = b"\0" * 32) -> "KnowledgeBase":
        keys = [TernaryKey(*k) for k in entries]
        f = np.array([k.fields for k in keys]).reshape(-1, 3)
        v = np.array([k.values for k in keys]).reshape(-1, 3)
        z = np.array([np.asarray(entries[k], dtype=np.float32) for k in entries]).reshape(-1, d_k)
        return cls(f, v, z, d_k, schema_hash)

    def __len__(self) -> int:
        return len(self.fields)

    def index(self, backend=None):
        be = kernels.get_backend(backend)
        idx = self._index.get(be.BACKEND)
        if idx is None:
            idx = self._index[be.BACKEND] = be.build_index(self.fields, self.values)
        return idx

    def keys(self) -> list[TernaryKey]:
        return [TernaryKey.of(f, v) for f, v in zip(self.fields.tolist(), self.values.tolist())]

    def key_set(self) -> set[tuple]:
        return set(self.keys())

    def rows(self, fields, values, backend=None) -> np.ndarray:
        be = kernels.get_backend(backend)
        return be.lookup_rows(self.index(backend), self.fields, self.values, fields, values)

    def lookup(self, key, backend=None) -> tuple[np.ndarray, bool]:
        """Stored vector and True, or a zero vector and False on a miss."""
        key = TernaryKey(*key)
        row = int(self.rows([key.fields], [key.values], backend)[0])
        if row < 0:
            return np.zeros(self.d_k, dtype=np.float32), False
        return self.vectors[row].copy(), True

    def as_dict(self) -> dict[TernaryKey, np.ndarray]:
        return {k: self.vectors[i] for i, k in enumerate(self.keys())}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.fields, self.values, self.vectors):
            h.update(a.tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        ent = np.empty(len(self), dtype=entry_dtype(self.d_k))
        ent["f"], ent["v"], ent["z"] = self.fields, self.values, self.vectors
        return HEADER.pack(KB_MAGIC, KB_VERSION, self.d_k, len(self), self.schema_hash) + ent.tobytes()

    @property
    def nbytes(self) -> int:
        return HEADER.size + len(self) * entry_dtype(self.d_k).itemsize


# ---------------------------------------------------------------------------
# generation


def expand_triples(data: Dataset, schema: FeatureSchema | None = None) -> dict[tuple[int, int, int], np.ndarray]:
    """Distinct single-value (user, item, context) value triples per field triple.

    Multi-valued fields are split into their elements.  Returns arrays of
    shape (n, 3) sorted lexicographically.
    """
    schema = schema or data.schema
    sides = schema.sides()
    iu, iv, ic = schema.kb_indices()
    out = {}
    for i in iu:
        vu, lu = data.field_values(sides[0][i].name)
        for j in iv:
            vv, lv = data.field_values(sides[1][j].name)
            for k in ic:
                vc, lc = data.field_values(sides[2][k].name)
                mask = ((np.arange(vu.shape[1])[None, :] < lu[:, None])[:, :, None, None]
                        & (np.arange(vv.shape[1])[None, :] < lv[:, None])[:, None, :, None]
                        & (np.arange(vc.shape[1])[None, :] < lc[:, None])[:, None, None, :])
                shape = mask.shape
                a = np.broadcast_to(vu[:, :, None, None], shape)[mask]
                b = np.broadcast_to(vv[:, None, :, None], shape)[mask]
                c = np.broadcast_to(vc[:, None, None, :], shape)[mask]
                out[(i, j, k)] = _unique_rows(a, b, c)
    return out


def _unique_rows(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    if a.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    top = max(int(a.max()), int(b.max()), int(c.max()))
    if top < (1 << 21) and min(int(a.min()), int(b.min()), int(c.min())) >= 0:
        packed = np.unique((a << 42) | (b << 21) | c)
        mask = (1 << 21) - 1
        return np.stack([packed >> 42, (packed >> 21) & mask, packed & mask], axis=1)
    return np.unique(np.stack([a, b, c], axis=1), axis=0)


def generate_kb(old: Dataset, encoder, schema: FeatureSchema | None = None, batch: int = 8192,
                meta: dict | None = None) -> KnowledgeBase:
    """One knowledge vector per distinct single-value ternary key in ``old``.

    Each key is encoded in isolation (the Transformer sees exactly its three
    features), so the stored vector does not depend on which sample the key
    was first seen in.
    """
    schema = schema or encoder.schema
    if [f.name for f in old.schema.fields] != [f.name for f in encoder.schema.fields]:
        raise ConfigError("data schema does not match the encoder's schema")
    if [f.name for f in schema.fields] != [f.name for f in encoder.schema.fields]:
        raise ConfigError("knowledge-base schema does not match the encoder's schema")
    triples = expand_triples(old, schema)
    F, V, Z = [], [], []
    for fkey, vals in triples.items():
        if len(vals) == 0:
            continue
        if vals.max() > MAX_VALUE:
            raise ConfigError("value id does not fit the 32-bit key format")
        for s in range(0, len(vals), batch):
            chunk = vals[s:s + batch]
            Z.append(encoder.triple_knowledge(fkey, chunk).astype(np.float32))
        V.append(vals)
        F.append(np.tile(np.array(fkey), (len(vals), 1)))
    info = {"encoder_checksum": encoder.checksum().hex(), "source_samples": len(old)}
    if len(old):
        info["source_time_range"] = (int(old.timestamps.min()), int(old.timestamps.max()))
    info.update(meta or {})
    if not F:
        return KnowledgeBase(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, encoder.d_k)),
                             encoder.d_k, schema.hash(), info)
    return KnowledgeBase(np.concatenate(F), np.concatenate(V), np.concatenate(Z),
                         encoder.d_k, schema.hash(), info)


# ---------------------------------------------------------------------------
# updates


def merge_kb(base: KnowledgeBase, incoming: KnowledgeBase, policy: str) -> KnowledgeBase:
    """New keys are inserted; shared keys are replaced (``rp``) or averaged (``ap``).

    Averaging is pairwise: the stored vector and the incoming one, each
    weighted one half, whatever the number of earlier generations.
    """
    policy = policy.lower()
    if policy not in ("rp", "ap"):
        raise ConfigError(f"update policy must be rp or ap, got {policy!r}")
    if base.d_k != incoming.d_k:
        raise ConfigError(f"d_k mismatch: base {base.d_k}, incoming {incoming.d_k}")
    rows = base.rows(incoming.fields, incoming.values) if len(base) else np.full(len(incoming), -1)
    vectors = base.vectors.copy()
    hit = rows >= 0
    if policy == "rp":
        vectors[rows[hit]] = incoming.vectors[hit]
    else:
        old = vectors[rows[hit]].astype(np.float64)
        vectors[rows[hit]] = ((old + incoming.vectors[hit].astype(np.float64)) / 2.0).astype(np.float32)
    fresh = ~hit
    meta = dict(base.meta)
    meta.setdefault("generations", 1)
    meta["generations"] += 1
    meta["last_policy"] = policy
    return KnowledgeBase(np.concatenate([base.fields, incoming.fields[fresh]]),
                         np.concatenate([base.values, incoming.values[fresh]]),
                         np.concatenate([vectors, incoming.vectors[fresh]]),
                         base.d_k, base.schema_hash, meta)


def update_kb(kb: KnowledgeBase, new_data: Dataset, new_encoder, policy: str,
              schema: FeatureSchema | None = None) -> KnowledgeBase:
    """Encode ``new_data`` with ``new_encoder`` and merge into a new base."""
    if new_encoder.d_k != kb.d_k:
        raise ConfigError(f"d_k mismatch: base {kb.d_k}, encoder {new_encoder.d_k}")
    return merge_kb(kb, generate_kb(new_data, new_encoder, schema), policy)


# ---------------------------------------------------------------------------
# persistence


def save_kb(kb: KnowledgeBase, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(kb.to_bytes())
    os.replace(tmp, path)


def kb_from_bytes(buf: bytes) -> KnowledgeBase:
    if len(buf) < HEADER.size:
        raise FormatError("file shorter than header", len(buf))
    magic, version, d_k, count, schema_hash = HEADER.unpack_from(buf, 0)
    if magic != KB_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {KB_MAGIC!r}", 0)
    if version != KB_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    if d_k < 1:
        raise FormatError("d_k must be positive", 8)
    dt = entry_dtype(d_k)
    need = HEADER.size + count * dt.itemsize
    if len(buf) < need:
        whole = (len(buf) - HEADER.size) // dt.itemsize
        raise FormatError(f"truncated: {whole} of {count} entries complete",
                          HEADER.size + whole * dt.itemsize)
    if len(buf) > need:
        raise FormatError("trailing bytes after last entry", need)
    ent = np.frombuffer(buf, dtype=dt, count=count, offset=HEADER.size)
    fields, values = ent["f"].astype(np.uint16), ent["v"].astype(np.uint32)
    if count > 1:
        order = _key_order(fields, values)
        if np.any(order != np.arange(count)):
            bad = int(np.argmax(order != np.arange(count)))
            raise FormatError("entries not in key order", HEADER.size + bad * dt.itemsize)
    return KnowledgeBase(fields, values, ent["z"].astype(np.float32), d_k, schema_hash, presorted=True)


def load_kb(path) -> KnowledgeBase:
    return kb_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# statistics


@dataclass
class KBStats:
    entries: int
    bytes: int
    d_k: int
    histogram: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"entries": self.entries, "bytes": self.bytes, "d_k": self.d_k, "histogram": dict(self.histogram)}


def kb_stats(kb: KnowledgeBase, schema: FeatureSchema | None = None) -> KBStats:
    """Entry count, serialised size and entries per (user, item, context) field triple."""
    counts = Counter(map(tuple, kb.fields.tolist()))
    hist = {}
    for (i, j, k), n in sorted(counts.items()):
        if schema is not None:
            sides = schema.sides()
            label = f"{sides[0][i].name}x{sides[1][j].name}x{sides[2][k].name}"
        else:
            label = f"u{i}xv{j}xc{k}"
        hist[label] = n
    return KBStats(len(kb), kb.nbytes, kb.d_k, hist)
