"""Query generation, retrieval, per-sample adaptation and knowledge injection."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tensor
from .data import Dataset, FeatureSchema, Sample
from .errors import ConfigError
from .kbase import KnowledgeBase


class QueryTerm(NamedTuple):
    fields: tuple[int, int, int]
    values: tuple[tuple[int, ...], tuple[int, ...], tuple[int, ...]]

    def expand(self):
        """Single-value keys ``(fields, (u, v, c))`` in nested order."""
        for u in self.values[0]:
            for v in self.values[1]:
                for c in self.values[2]:
                    yield self.fields, (u, v, c)


def query_terms(schema: FeatureSchema) -> list[tuple[int, int, int]]:
    iu, iv, ic = schema.kb_indices()
    return [(i, j, k) for i in iu for j in iv for k in ic]


def gen_queries(x: Sample, schema: FeatureSchema) -> list[QueryTerm]:
    """One term per knowledge-base field triple, nested (user, item, context) order."""
    per_side = (x.user_values, x.item_values, x.context_values)
    if any(len(v) != len(fs) for v, fs in zip(per_side, schema.sides())):
        raise ConfigError("sample does not match schema field counts")

    def vals(side, i):
        v = per_side[side][i]
        return tuple(v) if isinstance(v, (tuple, list)) else (v,)

    return [QueryTerm((i, j, k), (vals(0, i), vals(1, j), vals(2, k))) for i, j, k in query_terms(schema)]


@dataclass
class RetrievedKnowledge:
    vectors: np.ndarray  # (B, N_q, d_k) float64
    hits: np.ndarray     # (B, N_q) bool

    @property
    def hit_rate(self) -> np.ndarray:
        return self.hits.mean(axis=1) if self.hits.size else np.zeros(len(self.hits))

    def take(self, idx) -> "RetrievedKnowledge":
        return RetrievedKnowledge(self.vectors[idx], self.hits[idx])

    @property
    def flat(self) -> np.ndarray:
        return self.vectors.reshape(len(self.vectors), -1)


def _query_arrays(data: Dataset, schema: FeatureSchema):
    iu, iv, ic = schema.kb_indices()
    sides = schema.sides()
    cols = [sides[0][i].name for i in iu] + [sides[1][j].name for j in iv] + [sides[2][k].name for k in ic]
    pairs = [data.field_values(c) for c in cols]
    L = max(v.shape[1] for v, _ in pairs)
    vals = np.zeros((len(data), len(cols), L), dtype=np.int64)
    lens = np.zeros((len(data), len(cols)), dtype=np.int64)
    for c, (v, n) in enumerate(pairs):
        vals[:, c, :v.shape[1]] = v
        lens[:, c] = n
    nu, nv = len(iu), len(iv)
    term_fields, term_cols = [], []
    for a, i in enumerate(iu):
        for b, j in enumerate(iv):
            for c, k in enumerate(ic):
                term_fields.append((i, j, k))
                term_cols.append((a, nu + b, nu + nv + c))
    return (np.array(term_fields, dtype=np.int64).reshape(-1, 3),
            np.array(term_cols, dtype=np.int64).reshape(-1, 3), vals, lens)


def retrieve(data: Dataset | Sample, kb: KnowledgeBase, schema: FeatureSchema | None = None,
             backend: str | None = None, batch: int = 65536) -> RetrievedKnowledge:
    """Global knowledge for every sample and query term.

    Terms touching multi-valued fields average the lookups of every split
    key; missing keys contribute zero vectors and clear the term's hit flag.
    """
    if isinstance(data, Sample):
        if schema is None:
            raise ConfigError("retrieving for a single Sample needs a schema")
        data = Dataset.from_samples(schema, [data])
    schema = schema or data.schema
    if schema is not data.schema:
        data = data.with_schema(schema)
    be = kernels.get_backend(backend)
    index = kb.index(backend)
    tf, tc, vals, lens = _query_arrays(data, schema)
    if len(data) <= batch:
        out, hits = be.retrieve_batch(index, kb.fields, kb.values, kb.vectors, tf, tc, vals, lens)
        return RetrievedKnowledge(out, hits)
    outs, hs = [], []
    for s in range(0, len(data), batch):
        o, h = be.retrieve_batch(index, kb.fields, kb.values, kb.vectors, tf, tc,
                                 vals[s:s + batch], lens[s:s + batch])
        outs.append(o)
        hs.append(h)
    return RetrievedKnowledge(np.concatenate(outs), np.concatenate(hs))


# ---------------------------------------------------------------------------
# adaptation


ADAPTATIONS = ("none", "share", "sep", "small")


@dataclass
class AdaptationUnit:
    """Projection from a sample embedding to per-sample MLP weights.

    ``w_pro`` has shape ``(L * d_k * (d_k + 1), F * d_in)``; the projected
    vector is consumed layer by layer as a ``d_k x d_k`` weight (row-major)
    followed by a ``d_k`` bias.
    """

    w_pro: Tensor
    layers: int
    d_k: int
    source: str = "share"

    @staticmethod
    def n_generated(layers: int, d_k: int) -> int:
        return layers * d_k * (d_k + 1)

    @classmethod
    def init(cls, rng: np.random.Generator, layers: int, d_k: int, in_width: int,
             source: str = "share", name: str = "adp.w_pro") -> "AdaptationUnit":
        if layers < 1:
            raise ConfigError("adaptation needs at least one layer")
        rows = cls.n_generated(layers, d_k)
        bound = 1.0 / np.sqrt(in_width)
        w = ag.parameter(rng.uniform(-bound, bound, size=(rows, in_width)), name)
        return cls(w, layers, d_k, source)

    def slices(self) -> list[tuple[slice, slice]]:
        out, off, dk = [], 0, self.d_k
        for _ in range(self.layers):
            out.append((slice(off, off + dk * dk), slice(off + dk * dk, off + dk * dk + dk)))
            off += dk * (dk + 1)
        if off != self.w_pro.shape[0]:
            raise ConfigError(f"projection yields {self.w_pro.shape[0]} values, layers need {off}")
        return out


def adapt(x_embedding, z, unit: AdaptationUnit) -> Tensor:
    """Pass knowledge through the MLP whose weights are generated from the sample.

    ``x_embedding`` is ``(F*d,)`` or ``(B, F*d)``; ``z`` is ``(d_k,)``,
    ``(N_q, d_k)`` or ``(B, N_q, d_k)``.  Every layer uses tanh.
    """
    x = ag.as_tensor(x_embedding)
    z = ag.as_tensor(z)
    single = x.data.ndim == 1
    if single:
        x = ag.reshape(x, (1, -1))
    if x.shape[-1] != unit.w_pro.shape[1]:
        raise ConfigError(f"sample embedding width {x.shape[-1]} != projection input {unit.w_pro.shape[1]}")
    if z.shape[-1] != unit.d_k:
        raise ConfigError(f"knowledge width {z.shape[-1]} != d_k {unit.d_k}")
    B, dk = x.shape[0], unit.d_k
    z_shape = z.shape
    h = ag.reshape(z, (B, -1, dk))
    w_x = x @ ag.swap_last(unit.w_pro)
    for ws, bs in unit.slices():
        W = ag.reshape(w_x[:, ws], (B, dk, dk))
        b = ag.reshape(w_x[:, bs], (B, 1, dk))
        h = ag.tanh(h @ ag.swap_last(W) + b)
    return ag.reshape(h, z_shape)


# ---------------------------------------------------------------------------
# injection


def inject_concat(x_embedding, knowledge) -> Tensor:
    """``concat(x, z_1, ..., z_Nq)`` along the last axis."""
    x = ag.as_tensor(x_embedding)
    k = ag.as_tensor(knowledge.vectors if isinstance(knowledge, RetrievedKnowledge) else knowledge)
    if x.data.ndim == 1:
        return ag.concat([x, ag.reshape(k, (-1,))], axis=0)
    return ag.concat([x, ag.reshape(k, (x.shape[0], -1))], axis=-1)


def tower_params(rng: np.random.Generator, kind: str, width: int, hidden: int = 32) -> dict[str, Tensor]:
    from .layers import dense_layers
    params: dict[str, Tensor] = {}
    if kind == "linear":
        dense_layers(rng, "tower", (width, 1), params)
    elif kind == "deep":
        dense_layers(rng, "tower", (width, hidden, 1), params)
    else:
        raise ConfigError(f"tower kind must be linear or deep, got {kind!r}")
    return params


def tower_logit(params: dict[str, Tensor], knowledge) -> Tensor:
    from .layers import layer_list
    k = ag.as_tensor(knowledge.vectors if isinstance(knowledge, RetrievedKnowledge) else knowledge)
    flat = ag.reshape(k, (k.shape[0], -1)) if k.data.ndim > 1 else ag.reshape(k, (1, -1))
    acts = ("linear",) if "tower.w1" not in params else ("tanh", "linear")
    out = ag.mlp_forward(flat, layer_list(params, "tower", acts))
    return ag.reshape(out, (-1,))


def inject_tower(backbone_logit, knowledge, params: dict[str, Tensor]) -> Tensor:
    """``sigmoid(backbone_logit + P(concat(knowledge)))``."""
    return ag.sigmoid(ag.as_tensor(backbone_logit) + tower_logit(params, knowledge))


def direct_predict(knowledge, head: dict[str, Tensor]) -> np.ndarray:
    """Probability from knowledge alone through a linear head."""
    return ag.sigmoid(tower_logit(head, knowledge)).data
