"""Transformer knowledge encoder over user/item/context feature fields.

The encoder embeds every field (averaging multi-valued ones), runs one
Transformer block over the field set, builds one cross vector per
(user field, item field, context field) triple, maps each through the
knowledge network to a ``d_k`` knowledge vector and reads the click
probability off a linear head over all knowledge vectors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, FeatureSchema
from .errors import ConfigError, DataError
from .layers import (TrainHistory, embed_batch, embedding_tables, train_loop, transformer_block,
                     transformer_params, uniform_weight)

ENCODER_MAGIC = b"D2KE"


@dataclass
class EncoderConfig:
    d: int = 16
    d_k: int = 8
    heads: int = 2
    hidden: int = 32
    ffn_hidden: int = 32
    lr: float = 3e-3
    batch: int = 256
    epochs: int = 10
    seed: int = 0
    tol: float = 1e-4


class EncoderModel:
    def __init__(self, schema: FeatureSchema, vocab_sizes: dict[str, int], config: EncoderConfig | None = None,
                 params: dict[str, Tensor] | None = None):
        self.schema = schema
        self.vocab_sizes = dict(vocab_sizes)
        self.config = config or EncoderConfig()
        c = self.config
        if c.d % c.heads:
            raise ConfigError(f"embedding dim {c.d} not divisible by {c.heads} heads")
        self.history: TrainHistory | None = None
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(c.seed)
        p: dict[str, Tensor] = {}
        embedding_tables(rng, "emb", schema, self.vocab_sizes, c.d, p)
        transformer_params(rng, "trm", c.d, c.ffn_hidden, p)
        p["kn.w1"] = ag.parameter(uniform_weight(rng, (3 * c.d, c.hidden)), "kn.w1")
        p["kn.b1"] = ag.parameter(np.zeros(c.hidden), "kn.b1")
        p["kn.w2"] = ag.parameter(uniform_weight(rng, (c.hidden, c.d_k)), "kn.w2")
        p["kn.b2"] = ag.parameter(np.zeros(c.d_k), "kn.b2")
        width = schema.n_queries * c.d_k
        p["head.w"] = ag.parameter(uniform_weight(rng, (width,)), "head.w")
        p["head.b"] = ag.parameter(np.zeros(1), "head.b")
        self.params = p

    @property
    def d_k(self) -> int:
        return self.config.d_k

    # -- forward pieces -------------------------------------------------

    def embed(self, data: Dataset) -> Tensor:
        return embed_batch(self.params, "emb", data)

    def encode(self, X: Tensor) -> Tensor:
        """``(B, F, d)`` field embeddings -> ``(B, F, d)`` field representations."""
        return transformer_block(self.params, "trm", X, self.config.heads)

    def knowledge_net(self, gu: Tensor, gv: Tensor, gc: Tensor) -> Tensor:
        """All user x item x context crosses of ``(B, I, d)``, ``(B, J, d)``, ``(B, K, d)``.

        Returns ``(B, I*J*K, d_k)`` in nested (i, j, k) order.  The first layer
        on concat(g_u, g_v, g_c) is applied as the sum of its three column
        blocks, which is the same affine map without materialising every cross.
        """
        d = self.config.d
        w1 = self.params["kn.w1"]
        B, I, J, K = gu.shape[0], gu.shape[1], gv.shape[1], gc.shape[1]
        hu = ag.reshape(gu @ w1[0:d], (B, I, 1, 1, -1))
        hv = ag.reshape(gv @ w1[d:2 * d], (B, 1, J, 1, -1))
        hc = ag.reshape(gc @ w1[2 * d:3 * d], (B, 1, 1, K, -1))
        h = ag.tanh(hu + hv + hc + self.params["kn.b1"])
        z = h @ self.params["kn.w2"] + self.params["kn.b2"]
        return ag.reshape(z, (B, I * J * K, self.config.d_k))

    def cross_knowledge(self, E: Tensor) -> Tensor:
        iu, iv, ic = self.schema.kb_indices()
        s = self.schema
        rows = lambda side, idx: np.array([s.global_index(side, i) for i in idx])
        gu = E[:, rows(0, iu), :]
        gv = E[:, rows(1, iv), :]
        gc = E[:, rows(2, ic), :]
        return self.knowledge_net(gu, gv, gc)

    def head(self, z: Tensor) -> Tensor:
        B = z.shape[0]
        flat = ag.reshape(z, (B, -1))
        return flat @ self.params["head.w"] + self.params["head.b"]

    def logits(self, data: Dataset) -> Tensor:
        return self.head(self.cross_knowledge(self.encode(self.embed(data))))

    def forward(self, data: Dataset) -> Tensor:
        return ag.sigmoid(self.logits(data))

    def predict(self, data: Dataset, batch: int = 4096) -> np.ndarray:
        out = [self.forward(data.take(np.arange(s, min(s + batch, len(data))))).data
               for s in range(0, len(data), batch)]
        return np.concatenate(out) if out else np.zeros(0)

    def loss(self, data: Dataset) -> Tensor:
        return ag.bce_loss(self.forward(data), data.labels)

    # -- knowledge extraction --------------------------------------------

    def triple_knowledge(self, fields: tuple[int, int, int], values: np.ndarray) -> np.ndarray:
        """Knowledge vectors for single-valued triples, each encoded in isolation.

        ``fields`` are within-side field indices; ``values`` is ``(n, 3)``.
        The Transformer sees exactly the three features of each triple.
        """
        values = np.asarray(values, dtype=np.int64).reshape(-1, 3)
        sides = self.schema.sides()
        names = [sides[s][fields[s]].name for s in range(3)]
        cols = []
        for s, name in enumerate(names):
            table = self.params[f"emb.{name}"]
            v = values[:, s]
            if v.size and (v.min() < 0 or v.max() >= table.shape[0]):
                raise DataError(f"value id out of range for field {name!r}")
            cols.append(ag.gather_rows(table, v))
        E = self.encode(ag.stack(cols, axis=1))
        return self.knowledge_net(E[:, 0:1, :], E[:, 1:2, :], E[:, 2:3, :]).data[:, 0, :]

    # -- persistence ----------------------------------------------------

    def save(self, path) -> None:
        hyper = {"config": asdict(self.config), "vocab_sizes": self.vocab_sizes,
                 "schema": self.schema.to_text()}
        save_checkpoint(path, ENCODER_MAGIC, self.schema, hyper, self.params)

    @classmethod
    def load(cls, path) -> "EncoderModel":
        hyper, params = load_checkpoint(path, ENCODER_MAGIC)
        schema = FeatureSchema.from_text(hyper["schema"])
        return cls(schema, hyper["vocab_sizes"], EncoderConfig(**hyper["config"]), params)

    def checksum(self) -> bytes:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return h.digest()


def train_encoder(old: Dataset, config: EncoderConfig | None = None,
                  vocab_sizes: dict[str, int] | None = None) -> EncoderModel:
    """Fit the encoder with mean-per-batch BCE on the old data."""
    if old is None or len(old) == 0:
        raise ConfigError("encoder training data is empty")
    config = config or EncoderConfig()
    model = EncoderModel(old.schema, vocab_sizes or old.vocab_sizes(), config)
    model.history = train_loop(
        model.params, lambda idx: model.loss(old.take(idx)), len(old),
        lr=config.lr, batch=config.batch, epochs=config.epochs, seed=config.seed + 1,
        tol=config.tol, label="encoder")
    return model
