"""Feature schema, log records, vocabularies and chronological splits."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError

SIDES = ("user", "item", "context")
KINDS = ("single", "multi")
OOV = 0
DEFAULT_MAX_MULTI = 16


@dataclass(frozen=True)
class Field:
    name: str
    side: str
    kind: str = "single"

    @property
    def multi(self) -> bool:
        return self.kind == "multi"


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered user, item and context fields plus the knowledge-base subset.

    Field order is user fields, then item fields, then context fields; this
    is the row order of every per-sample embedding matrix.
    """

    user_fields: tuple[Field, ...]
    item_fields: tuple[Field, ...]
    context_fields: tuple[Field, ...]
    kb_subset: tuple[str, ...] | None = None
    max_multi: int = DEFAULT_MAX_MULTI

    def __post_init__(self):
        for side, fs in zip(SIDES, self.sides()):
            if not fs:
                raise ConfigError(f"schema needs at least one {side} field")
            for f in fs:
                if f.side != side:
                    raise ConfigError(f"field {f.name!r} declared on side {f.side!r} but listed under {side}")
                if f.kind not in KINDS:
                    raise ConfigError(f"field {f.name!r}: kind must be single or multi, got {f.kind!r}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError("field names must be unique")
        if self.kb_subset is not None:
            unknown = set(self.kb_subset) - set(names)
            if unknown:
                raise ConfigError(f"kb_subset names undeclared fields: {sorted(unknown)}")
            for side, fs in zip(SIDES, self.sides()):
                if not any(f.name in self.kb_subset for f in fs):
                    raise ConfigError(f"kb_subset needs at least one {side} field")
        if self.max_multi < 1:
            raise ConfigError("max_multi must be >= 1")

    @classmethod
    def build(cls, user: Sequence, item: Sequence, context: Sequence,
              kb_subset: Sequence[str] | None = None, max_multi: int = DEFAULT_MAX_MULTI) -> "FeatureSchema":
        """Build from ``(name, kind)`` pairs or bare names (single-valued)."""
        def mk(items, side):
            out = []
            for it in items:
                name, kind = (it, "single") if isinstance(it, str) else it
                out.append(Field(name, side, kind))
            return tuple(out)
        return cls(mk(user, "user"), mk(item, "item"), mk(context, "context"),
                   tuple(kb_subset) if kb_subset is not None else None, max_multi)

    def sides(self) -> tuple[tuple[Field, ...], ...]:
        return (self.user_fields, self.item_fields, self.context_fields)

    @property
    def fields(self) -> tuple[Field, ...]:
        return self.user_fields + self.item_fields + self.context_fields

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    def field(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(name)

    def kb_indices(self) -> tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]:
        """Per side, the within-side indices of fields taking part in the knowledge base."""
        keep = set(self.kb_subset) if self.kb_subset is not None else None
        return tuple(
            tuple(i for i, f in enumerate(fs) if keep is None or f.name in keep)
            for fs in self.sides()
        )

    @property
    def n_queries(self) -> int:
        iu, iv, ic = self.kb_indices()
        return len(iu) * len(iv) * len(ic)

    def global_index(self, side: int, local: int) -> int:
        return sum(len(fs) for fs in self.sides()[:side]) + local

    def with_kb_subset(self, kb_subset: Sequence[str] | None) -> "FeatureSchema":
        return FeatureSchema(self.user_fields, self.item_fields, self.context_fields,
                             tuple(kb_subset) if kb_subset is not None else None, self.max_multi)

    def to_text(self) -> str:
        lines = []
        for side, fs in zip(SIDES, self.sides()):
            lines.append(f"{side} = " + ", ".join(f"{f.name}:{f.kind}" for f in fs))
        if self.kb_subset is not None:
            lines.append("kb_subset = " + ", ".join(self.kb_subset))
        lines.append(f"max_multi = {self.max_multi}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FeatureSchema":
        """Parse ``key = value`` lines; ``#`` starts a comment.

        Keys: ``user``, ``item``, ``context`` (comma-separated ``name[:kind]``),
        ``kb_subset`` (comma-separated names) and ``max_multi``.
        """
        decl: dict[str, list] = {}
        kb = None
        max_multi = DEFAULT_MAX_MULTI
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"schema line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            items = [v.strip() for v in value.split(",") if v.strip()]
            if key in SIDES:
                decl[key] = [tuple(it.split(":", 1)) if ":" in it else (it, "single") for it in items]
            elif key == "kb_subset":
                kb = items
            elif key == "max_multi":
                max_multi = int(value)
            else:
                raise ConfigError(f"schema line {lineno}: unknown key {key!r}")
        return cls.build(decl.get("user", []), decl.get("item", []), decl.get("context", []),
                         kb, max_multi)

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def hash(self) -> bytes:
        """32-byte SHA-256 of the canonical text form."""
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


@dataclass
class Sample:
    """One log record; multi-valued fields hold a tuple of value IDs."""

    user_values: tuple
    item_values: tuple
    context_values: tuple
    label: int
    timestamp: int = 0

    def values(self) -> tuple:
        return self.user_values + self.item_values + self.context_values


@dataclass
class Vocabulary:
    """Per-field token -> dense ID maps; ID 0 is reserved for unseen tokens."""

    maps: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, fname: str, token: str) -> int:
        m = self.maps.setdefault(fname, {})
        idx = m.get(token)
        if idx is None:
            idx = len(m) + 1
            m[token] = idx
        return idx

    def encode(self, fname: str, token: str) -> int:
        return self.maps.get(fname, {}).get(token, OOV)

    def decode(self, fname: str, idx: int) -> str | None:
        for tok, i in self.maps.get(fname, {}).items():
            if i == idx:
                return tok
        return None

    def size(self, fname: str) -> int:
        """Row count needed for this field, OOV row included."""
        return len(self.maps.get(fname, {})) + 1


class Dataset:
    """Columnar store of samples sharing one schema.

    Single-valued fields are ``(N,)`` int64 arrays.  Multi-valued fields are
    ``(N, L)`` int64 arrays padded with 0 plus an ``(N,)`` length array;
    padding is masked by length, never by value.
    """

    def __init__(self, schema: FeatureSchema, columns: dict[str, np.ndarray],
                 lengths: dict[str, np.ndarray], labels: np.ndarray, timestamps: np.ndarray):
        self.schema = schema
        self.columns = columns
        self.lengths = lengths
        self.labels = np.asarray(labels, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        n = len(self.labels)
        for f in schema.fields:
            col = columns[f.name]
            if col.shape[0] != n:
                raise DataError(f"column {f.name!r} has {col.shape[0]} rows, expected {n}")
            if f.multi and (f.name not in lengths or np.any(lengths[f.name] < 1)):
                raise DataError(f"multi-valued field {f.name!r} needs lengths >= 1")

    @classmethod
    def from_samples(cls, schema: FeatureSchema, samples: Sequence[Sample]) -> "Dataset":
        columns, lengths = {}, {}
        for gi, f in enumerate(schema.fields):
            vals = [s.values()[gi] for s in samples]
            if f.multi:
                vals = [tuple(v)[-schema.max_multi:] or (OOV,) for v in vals]
                width = max((len(v) for v in vals), default=1)
                arr = np.zeros((len(vals), width), dtype=np.int64)
                for r, v in enumerate(vals):
                    arr[r, :len(v)] = v
                columns[f.name] = arr
                lengths[f.name] = np.array([len(v) for v in vals], dtype=np.int64)
            else:
                columns[f.name] = np.array(vals, dtype=np.int64).reshape(len(vals))
        return cls(schema, columns, lengths,
                   np.array([s.label for s in samples], dtype=np.int64),
                   np.array([s.timestamp for s in samples], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        if i < 0:
            i += len(self)
        per_side = []
        for fs in self.schema.sides():
            vals = []
            for f in fs:
                if f.multi:
                    n = int(self.lengths[f.name][i])
                    vals.append(tuple(int(v) for v in self.columns[f.name][i, :n]))
                else:
                    vals.append(int(self.columns[f.name][i]))
            per_side.append(tuple(vals))
        return Sample(*per_side, label=int(self.labels[i]), timestamp=int(self.timestamps[i]))

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        cols = {k: v[idx] for k, v in self.columns.items()}
        lens = {k: v[idx] for k, v in self.lengths.items()}
        return Dataset(self.schema, cols, lens, self.labels[idx], self.timestamps[idx])

    def with_schema(self, schema: FeatureSchema) -> "Dataset":
        if [f.name for f in schema.fields] != [f.name for f in self.schema.fields]:
            raise ConfigError("schemas declare different fields")
        return Dataset(schema, self.columns, self.lengths, self.labels, self.timestamps)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        parts = [p for p in parts if p is not None]
        if not parts:
            raise DataError("nothing to concatenate")
        schema = parts[0].schema
        cols, lens = {}, {}
        for f in schema.fields:
            if f.multi:
                width = max(p.columns[f.name].shape[1] for p in parts)
                cols[f.name] = np.concatenate([
                    np.pad(p.columns[f.name], ((0, 0), (0, width - p.columns[f.name].shape[1])))
                    for p in parts])
                lens[f.name] = np.concatenate([p.lengths[f.name] for p in parts])
            else:
                cols[f.name] = np.concatenate([p.columns[f.name] for p in parts])
        return Dataset(schema, cols, lens,
                       np.concatenate([p.labels for p in parts]),
                       np.concatenate([p.timestamps for p in parts]))

    def field_values(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """``(values (N, L), lengths (N,))`` for any field; singles get L=1."""
        col = self.columns[name]
        if col.ndim == 1:
            return col[:, None], np.ones(len(col), dtype=np.int64)
        return col, self.lengths[name]

    def vocab_sizes(self) -> dict[str, int]:
        """Smallest row count covering every ID present, OOV row included."""
        out = {}
        for f in self.schema.fields:
            vals, lens = self.field_values(f.name)
            mask = np.arange(vals.shape[1])[None, :] < lens[:, None]
            out[f.name] = int(vals[mask].max(initial=0)) + 1
        return out


# ---------------------------------------------------------------------------
# log files


def load_logs(path, schema: FeatureSchema, vocab: Vocabulary | None = None) -> tuple[Dataset, Vocabulary]:
    """Read a TSV log.

    The header names ``timestamp``, ``label`` and then every schema field.
    When ``vocab`` is None a fresh vocabulary is built from this file;
    otherwise it is used read-only and unseen tokens map to ID 0.
    """
    build = vocab is None
    vocab = vocab if vocab is not None else Vocabulary()
    path = Path(path)
    samples = []
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        want = ["timestamp", "label"] + [f.name for f in schema.fields]
        if header[:2] != ["timestamp", "label"] or sorted(header[2:]) != sorted(want[2:]):
            raise DataError(f"{path}:1: header must be timestamp, label, then fields {want[2:]}")
        col_of = {name: header.index(name) for name in want}
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            cells = line.split("\t")
            if len(cells) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
            try:
                ts = int(cells[col_of["timestamp"]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp is not an integer") from None
            lab = cells[col_of["label"]].strip()
            if lab not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {lab!r}")
            per_side = []
            for fs in schema.sides():
                vals = []
                for f in fs:
                    cell = cells[col_of[f.name]]
                    if f.multi:
                        toks = [t for t in cell.split("|") if t != ""]
                        ids = tuple(vocab.add(f.name, t) if build else vocab.encode(f.name, t) for t in toks)
                        vals.append(ids)
                    else:
                        vals.append(vocab.add(f.name, cell) if build else vocab.encode(f.name, cell))
                per_side.append(tuple(vals))
            samples.append(Sample(*per_side, label=int(lab), timestamp=ts))
    return Dataset.from_samples(schema, samples), vocab


def write_logs(path, data: Dataset, vocab: Vocabulary | None = None) -> None:
    """Write a dataset as TSV; without a vocabulary IDs are written as tokens."""
    schema = data.schema
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("\t".join(["timestamp", "label"] + [f.name for f in schema.fields]) + "\n")
        decoders = {}
        if vocab is not None:
            decoders = {f: {i: t for t, i in m.items()} for f, m in vocab.maps.items()}
        for s in data:
            cells = [str(s.timestamp), str(s.label)]
            for f, v in zip(schema.fields, s.values()):
                dec = decoders.get(f.name, {})
                if f.multi:
                    cells.append("|".join(dec.get(x, str(x)) for x in v))
                else:
                    cells.append(dec.get(v, str(v)))
            fh.write("\t".join(cells) + "\n")


def save_vocab(path, vocab: Vocabulary) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for fname, m in vocab.maps.items():
            for tok, idx in m.items():
                fh.write(f"{fname}\t{idx}\t{tok}\n")


def load_vocab(path) -> Vocabulary:
    vocab = Vocabulary()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        fname, idx, tok = line.split("\t", 2)
        vocab.maps.setdefault(fname, {})[tok] = int(idx)
    return vocab


# ---------------------------------------------------------------------------
# chronological partitioning


@dataclass
class DatasetPartition:
    blocks: list[Dataset]
    p1: int
    p2: int
    gap: int

    @property
    def old(self) -> Dataset | None:
        return _join(self.blocks[: self.p1])

    @property
    def train(self) -> Dataset:
        return _join(self.blocks[self.p1 + self.gap: self.p2])

    @property
    def test(self) -> Dataset:
        return _join(self.blocks[self.p2:])

    @property
    def dropped(self) -> Dataset | None:
        return _join(self.blocks[self.p1: self.p1 + self.gap])

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)


def _join(blocks: Sequence[Dataset]) -> Dataset | None:
    blocks = [b for b in blocks if len(b)]
    if not blocks:
        return None
    return blocks[0] if len(blocks) == 1 else Dataset.concat(blocks)


def split_windows(data: Dataset, window_seconds: int, origin: int | None = None) -> list[Dataset]:
    """Half-open windows ``[origin + k*w, origin + (k+1)*w)`` in time order."""
    if window_seconds <= 0:
        raise ConfigError("window_seconds must be positive")
    if len(data) == 0:
        return []
    origin = int(data.timestamps.min()) if origin is None else origin
    win = (data.timestamps - origin) // window_seconds
    order = np.argsort(data.timestamps, kind="stable")
    n = int(win.max()) + 1
    return [data.take(order[win[order] == k]) for k in range(n)]


def partition(data: Dataset, window_seconds: int, p1: int, p2: int, gap: int = 0,
              origin: int | None = None) -> DatasetPartition:
    """Split into old / train / test blocks with ``gap`` windows dropped after old.

    Windows are numbered from 1: old = 1..p1, dropped = p1+1..p1+gap,
    train = p1+gap+1..p2, test = p2+1..T.
    """
    blocks = split_windows(data, window_seconds, origin)
    T = len(blocks)
    if gap < 0:
        raise ConfigError("gap must be >= 0")
    if not (0 <= p1 < p2 < T):
        raise ConfigError(f"need 0 <= p1 < p2 < T, got p1={p1}, p2={p2}, T={T}")
    part = DatasetPartition(blocks, p1, p2, gap)
    if part.train is None:
        raise ConfigError(f"training split is empty (p1={p1}, gap={gap}, p2={p2})")
    if part.test is None:
        raise ConfigError("test split is empty")
    return part
