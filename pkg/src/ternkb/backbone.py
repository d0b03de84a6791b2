"""Embedding + feed-forward click model with optional FM term and knowledge injection.

Modes:

* ``plain``: the bare backbone.
* ``concat``: knowledge vectors are appended to the flattened field
  embeddings before the feed-forward network (never to the FM term).
* ``tower_lr`` / ``tower_mlp``: a separate linear / 2-layer tower over the
  knowledge adds its logit to the backbone's.
* ``direct``: no backbone; a linear head over knowledge only.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, FeatureSchema
from .errors import ConfigError
from .kbase import KnowledgeBase
from .layers import TrainHistory, dense_layers, embed_batch, embedding_tables, layer_list, train_loop
from .utilize import ADAPTATIONS, AdaptationUnit, adapt, retrieve, tower_logit, tower_params

BACKBONE_MAGIC = b"D2KB"
MODES = ("plain", "concat", "tower_lr", "tower_mlp", "direct")


@dataclass
class RecConfig:
    d: int = 16
    hidden: tuple[int, ...] = (64, 32)
    fm: bool = True
    adaptation: str = "none"
    adapt_layers: int = 1
    tower_hidden: int = 32
    lr: float = 1e-3
    batch: int = 256
    epochs: int = 5
    seed: int = 0
    tol: float = 1e-4

    def adapt_dim(self) -> int:
        return max(1, self.d // 4) if self.adaptation == "small" else self.d


class RecModel:
    def __init__(self, schema: FeatureSchema, vocab_sizes: dict[str, int], mode: str = "plain",
                 config: RecConfig | None = None, d_k: int = 8, params: dict[str, Tensor] | None = None):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        self.config = config or RecConfig()
        c = self.config
        if c.adaptation not in ADAPTATIONS:
            raise ConfigError(f"adaptation must be one of {ADAPTATIONS}, got {c.adaptation!r}")
        if mode == "plain" and c.adaptation != "none":
            raise ConfigError("plain mode takes no knowledge, so no adaptation")
        self.schema = schema
        self.vocab_sizes = dict(vocab_sizes)
        self.mode = mode
        self.d_k = d_k
        self.n_queries = schema.n_queries
        self.history: TrainHistory | None = None
        F = schema.n_fields
        if params is None:
            rng = np.random.default_rng(c.seed)
            params = {}
            if mode != "direct" or c.adaptation == "share":
                embedding_tables(rng, "emb", schema, self.vocab_sizes, c.d, params)
            if mode != "direct":
                width = F * c.d + (self.n_queries * d_k if mode == "concat" else 0)
                dense_layers(rng, "mlp", (width, *c.hidden, 1), params)
            if mode in ("tower_lr", "direct"):
                params.update(tower_params(rng, "linear", self.n_queries * d_k))
            elif mode == "tower_mlp":
                params.update(tower_params(rng, "deep", self.n_queries * d_k, c.tower_hidden))
            if c.adaptation in ("sep", "small"):
                embedding_tables(rng, "adp.emb", schema, self.vocab_sizes, c.adapt_dim(), params)
            if c.adaptation != "none":
                unit = AdaptationUnit.init(rng, c.adapt_layers, d_k, F * c.adapt_dim(), c.adaptation)
                params["adp.w_pro"] = unit.w_pro
        self.params = params
        self.adaptation = None
        if c.adaptation != "none":
            self.adaptation = AdaptationUnit(params["adp.w_pro"], c.adapt_layers, d_k, c.adaptation)

    @property
    def uses_knowledge(self) -> bool:
        return self.mode != "plain"

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _knowledge(self, data: Dataset, z: np.ndarray, emb: Tensor | None) -> Tensor:
        z = ag.Tensor(z)
        if self.adaptation is None:
            return z
        if self.config.adaptation == "share":
            src = emb if emb is not None else embed_batch(self.params, "emb", data)
        else:
            src = embed_batch(self.params, "adp.emb", data)
        x = ag.reshape(src, (len(data), -1))
        return adapt(x, z, self.adaptation)

    def backbone_logit(self, data: Dataset, knowledge: Tensor | None = None, emb: Tensor | None = None) -> Tensor:
        """Deep component logit (plus FM pairwise term when enabled)."""
        if self.mode == "direct":
            raise ConfigError("direct mode has no backbone")
        if (knowledge is not None) != (self.mode == "concat"):
            raise ConfigError("knowledge is fed to the backbone iff mode is concat")
        B = len(data)
        E = emb if emb is not None else embed_batch(self.params, "emb", data)
        x = ag.reshape(E, (B, -1))
        if knowledge is not None:
            x = ag.concat([x, ag.reshape(knowledge, (B, -1))], axis=-1)
        expected = self.params["mlp.w0"].shape[0]
        if x.shape[-1] != expected:
            raise ConfigError(f"backbone input width {x.shape[-1]} != {expected}")
        acts = ["tanh"] * len(self.config.hidden) + ["linear"]
        logit = ag.reshape(ag.mlp_forward(x, layer_list(self.params, "mlp", acts)), (B,))
        if self.config.fm:
            s = ag.sum_(E, axis=1)
            pair = ag.mul(ag.sub(ag.sum_(ag.mul(s, s), axis=-1), ag.sum_(ag.mul(E, E), axis=(1, 2))), 0.5)
            logit = logit + pair
        return logit

    def logit(self, data: Dataset, z: np.ndarray | None = None) -> Tensor:
        if self.uses_knowledge and z is None:
            raise ConfigError(f"mode {self.mode!r} needs retrieved knowledge")
        emb = None
        if self.mode != "direct" or self.config.adaptation == "share":
            emb = embed_batch(self.params, "emb", data)
        if self.mode == "plain":
            return self.backbone_logit(data, emb=emb)
        k = self._knowledge(data, z, emb)
        if self.mode == "concat":
            return self.backbone_logit(data, k, emb=emb)
        tower = tower_logit(self.params, k)
        if self.mode == "direct":
            return tower
        return self.backbone_logit(data, emb=emb) + tower

    def forward(self, data: Dataset, z: np.ndarray | None = None) -> Tensor:
        return ag.sigmoid(self.logit(data, z))

    def loss(self, data: Dataset, z: np.ndarray | None = None) -> Tensor:
        return ag.bce_loss(self.forward(data, z), data.labels)

    def save(self, path) -> None:
        hyper = {"config": asdict(self.config), "vocab_sizes": self.vocab_sizes, "mode": self.mode,
                 "d_k": self.d_k, "schema": self.schema.to_text()}
        save_checkpoint(path, BACKBONE_MAGIC, self.schema, hyper, self.params)

    @classmethod
    def load(cls, path) -> "RecModel":
        hyper, params = load_checkpoint(path, BACKBONE_MAGIC)
        cfg = dict(hyper["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        return cls(FeatureSchema.from_text(hyper["schema"]), hyper["vocab_sizes"], hyper["mode"],
                   RecConfig(**cfg), hyper["d_k"], params)


def knowledge_for(data: Dataset, kb: KnowledgeBase | None, schema: FeatureSchema | None = None) -> np.ndarray | None:
    if kb is None:
        return None
    return retrieve(data, kb, schema).vectors


def train_rec(train: Dataset, kb: KnowledgeBase | None = None, mode: str = "plain",
              config: RecConfig | None = None, seed: int | None = None, *,
              vocab_sizes: dict[str, int] | None = None, knowledge: np.ndarray | None = None,
              schema: FeatureSchema | None = None, d_k: int | None = None) -> RecModel:
    """Train with mean BCE on ``train``; the knowledge base stays frozen.

    ``knowledge`` may carry pre-retrieved vectors for ``train`` (shape
    ``(N, N_q, d_k)``) to skip retrieval.
    """
    config = config or RecConfig()
    if seed is not None:
        config = RecConfig(**{**asdict(config), "seed": seed})
    schema = schema or (train.schema if kb is None else train.schema)
    if mode != "plain":
        if knowledge is None:
            if kb is None:
                raise ConfigError(f"mode {mode!r} needs a knowledge base")
            knowledge = knowledge_for(train, kb, schema)
        d_k = knowledge.shape[-1]
    data = train if schema is train.schema else train.with_schema(schema)
    model = RecModel(schema, vocab_sizes or train.vocab_sizes(), mode, config, d_k or 8)
    z = knowledge

    def batch_loss(idx):
        return model.loss(data.take(idx), None if z is None else z[idx])

    model.history = train_loop(model.params, batch_loss, len(data), lr=config.lr, batch=config.batch,
                               epochs=config.epochs, seed=config.seed + 7, tol=config.tol,
                               label=f"rec[{mode}]")
    return model


def predict(model: RecModel, data: Dataset, kb: KnowledgeBase | None = None, mode: str | None = None, *,
            knowledge: np.ndarray | None = None, batch: int = 4096) -> np.ndarray:
    """Click probabilities; plain mode never touches ``kb``."""
    if mode is not None and mode != model.mode:
        raise ConfigError(f"model was trained in mode {model.mode!r}, asked for {mode!r}")
    if data.schema is not model.schema:
        data = data.with_schema(model.schema)
    if model.uses_knowledge and knowledge is None:
        if kb is None:
            raise ConfigError(f"mode {model.mode!r} needs a knowledge base")
        knowledge = knowledge_for(data, kb, model.schema)
    out = []
    for s in range(0, len(data), batch):
        idx = np.arange(s, min(s + batch, len(data)))
        z = None if not model.uses_knowledge else knowledge[idx]
        out.append(model.forward(data.take(idx), z).data)
    return np.concatenate(out) if out else np.zeros(0)
