"""Retrieval latency measurement."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, FeatureSchema
from .errors import ConfigError
from .kbase import KnowledgeBase
from .utilize import retrieve


@dataclass
class BenchResult:
    median_ms: float
    batch: int
    batches: int
    n_queries: int
    kb_entries: int
    kb_bytes: int
    backend: str
    times_ms: list[float]

    @property
    def per_sample_us(self) -> float:
        return 1000.0 * self.median_ms / self.batch

    def as_dict(self) -> dict:
        out = asdict(self)
        out["per_sample_us"] = self.per_sample_us
        return out


def bench_retrieval(kb: KnowledgeBase, dataset: Dataset, batch: int = 1024, n_batches: int = 20,
                    schema: FeatureSchema | None = None, backend: str | None = None) -> BenchResult:
    """Median wall time of ``retrieve`` over ``n_batches`` batches.

    Batches are consecutive slices of ``dataset`` (wrapping around when it is
    short).  One warm-up batch, which also builds the index, is discarded.
    """
    from . import kernels
    if batch < 1 or n_batches < 1:
        raise ConfigError("batch and n_batches must be positive")
    if len(dataset) == 0:
        raise ConfigError("benchmark dataset is empty")
    schema = schema or dataset.schema
    n = len(dataset)
    slices = [dataset.take((s * batch + np.arange(batch)) % n) for s in range(n_batches + 1)]
    retrieve(slices[0], kb, schema, backend=backend)
    times = []
    for part in slices[1:]:
        t0 = time.perf_counter()
        retrieve(part, kb, schema, backend=backend)
        times.append(1000.0 * (time.perf_counter() - t0))
    return BenchResult(float(np.median(times)), batch, n_batches, schema.n_queries, len(kb), kb.nbytes,
                       kernels.get_backend(backend).BACKEND, times)


def random_dataset(schema: FeatureSchema, vocab_sizes: dict[str, int], n: int, seed: int = 0,
                   max_len: int = 3) -> Dataset:
    """Uniform random samples (IDs 1..size-1; multi fields hold 1..max_len values)."""
    rng = np.random.default_rng(seed)
    columns, lengths = {}, {}
    for f in schema.fields:
        hi = vocab_sizes[f.name]
        if hi < 2:
            raise ConfigError(f"field {f.name!r} needs at least one non-OOV value")
        if f.multi:
            lens = rng.integers(1, max_len + 1, size=n)
            vals = rng.integers(1, hi, size=(n, max_len))
            vals[np.arange(max_len)[None, :] >= lens[:, None]] = 0
            columns[f.name], lengths[f.name] = vals, lens
        else:
            columns[f.name] = rng.integers(1, hi, size=n)
    return Dataset(schema, columns, lengths, rng.integers(0, 2, size=n), np.arange(n, dtype=np.int64))


def random_kb(schema: FeatureSchema, vocab_sizes: dict[str, int], n_entries: int, d_k: int = 8,
              seed: int = 0, cover: Dataset | None = None) -> KnowledgeBase:
    """Knowledge base of random vectors with at least ``n_entries`` keys.

    Every key that ``cover`` can query is included; the rest are random keys
    spread evenly over the field triples.
    """
    from .kbase import expand_triples
    from .utilize import query_terms
    rng = np.random.default_rng(seed)
    terms = query_terms(schema)
    sides = schema.sides()
    sizes = [(vocab_sizes[sides[0][i].name], vocab_sizes[sides[1][j].name], vocab_sizes[sides[2][k].name])
             for i, j, k in terms]
    if max(max(s) for s in sizes) >= 1 << 19:
        raise ConfigError("random_kb packs values in 19 bits")
    have = expand_triples(cover, schema) if cover is not None else {}
    codes = []
    for t, (fkey, size) in enumerate(zip(terms, sizes)):
        v = have.get(fkey, np.zeros((0, 3), dtype=np.int64)).astype(np.int64)
        codes.append((t << 57) | (v[:, 0] << 38) | (v[:, 1] << 19) | v[:, 2])
    packed = np.unique(np.concatenate(codes)) if codes else np.zeros(0, dtype=np.int64)
    capacity = sum(int(np.prod(s)) for s in sizes)
    if n_entries > capacity:
        raise ConfigError(f"schema holds at most {capacity} distinct keys, asked for {n_entries}")
    while len(packed) < n_entries:
        need = n_entries - len(packed)
        t = rng.integers(0, len(terms), size=need)
        hi = np.array(sizes, dtype=np.int64)[t]
        v = rng.integers(0, hi)
        extra = (t.astype(np.int64) << 57) | (v[:, 0] << 38) | (v[:, 1] << 19) | v[:, 2]
        packed = np.unique(np.concatenate([packed, extra]))
    t = packed >> 57
    values = np.stack([(packed >> 38) & 0x7FFFF, (packed >> 19) & 0x7FFFF, packed & 0x7FFFF], axis=1)
    fields = np.array(terms, dtype=np.int64)[t]
    vectors = rng.standard_normal((len(packed), d_k)).astype(np.float32)
    return KnowledgeBase(fields, values, vectors, d_k, schema.hash())
