"""Parameter initialisation, embedding lookup, Transformer block, training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, FeatureSchema
from .errors import ConfigError, DataError, TrainingError

log = logging.getLogger(__name__)


def uniform_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None) -> np.ndarray:
    fan_in = shape[0] if fan_in is None else fan_in
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def dense_layers(rng, prefix: str, sizes: Sequence[int], params: dict[str, Tensor]) -> None:
    """Add ``{prefix}.w{i}`` (in, out) and ``{prefix}.b{i}`` for consecutive sizes."""
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.w{i}"] = ag.parameter(uniform_weight(rng, (a, b)), f"{prefix}.w{i}")
        params[f"{prefix}.b{i}"] = ag.parameter(np.zeros(b), f"{prefix}.b{i}")


def layer_list(params: dict[str, Tensor], prefix: str, acts: Sequence[str]):
    return [(params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"], a) for i, a in enumerate(acts)]


def embedding_tables(rng, prefix: str, schema: FeatureSchema, vocab_sizes: dict[str, int], d: int,
                     params: dict[str, Tensor]) -> None:
    for f in schema.fields:
        rows = vocab_sizes[f.name]
        params[f"{prefix}.{f.name}"] = ag.parameter(uniform_weight(rng, (rows, d), fan_in=d), f"{prefix}.{f.name}")


def embed_field(table: Tensor, values: np.ndarray, lengths: np.ndarray | None) -> Tensor:
    """Row lookup; multi-valued fields are the mean of their element rows."""
    if values.size and (values.min() < 0 or values.max() >= table.shape[0]):
        raise DataError(f"value id out of range for table with {table.shape[0]} rows")
    if values.ndim == 1:
        return ag.gather_rows(table, values)
    mask = np.arange(values.shape[1])[None, :] < lengths[:, None]
    weights = (mask / lengths[:, None])[:, :, None]
    rows = ag.gather_rows(table, np.where(mask, values, 0))
    return ag.sum_(ag.mul(rows, weights), axis=1)


def embed_batch(params: dict[str, Tensor], prefix: str, data: Dataset) -> Tensor:
    """``(B, F, d)`` field embeddings in schema order."""
    cols = []
    for f in data.schema.fields:
        table = params[f"{prefix}.{f.name}"]
        if f.multi:
            cols.append(embed_field(table, data.columns[f.name], data.lengths[f.name]))
        else:
            cols.append(embed_field(table, data.columns[f.name], None))
    return ag.stack(cols, axis=1)


def transformer_params(rng, prefix: str, d: int, ffn_hidden: int, params: dict[str, Tensor]) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = ag.parameter(uniform_weight(rng, (d, d)), f"{prefix}.{name}")
    params[f"{prefix}.ln1.g"] = ag.parameter(np.ones(d), f"{prefix}.ln1.g")
    params[f"{prefix}.ln1.b"] = ag.parameter(np.zeros(d), f"{prefix}.ln1.b")
    dense_layers(rng, f"{prefix}.ffn", (d, ffn_hidden, d), params)
    params[f"{prefix}.ln2.g"] = ag.parameter(np.ones(d), f"{prefix}.ln2.g")
    params[f"{prefix}.ln2.b"] = ag.parameter(np.zeros(d), f"{prefix}.ln2.b")


def transformer_block(params: dict[str, Tensor], prefix: str, X: Tensor, heads: int) -> Tensor:
    """Post-norm block: LN(X + MHA(X)) then LN(H + FFN(H)); no positional terms."""
    p = lambda n: params[f"{prefix}.{n}"]
    att = ag.attention(X @ p("wq"), X @ p("wk"), X @ p("wv"), heads) @ p("wo")
    H = ag.layer_norm(X + att, p("ln1.g"), p("ln1.b"))
    ff = ag.mlp_forward(H, layer_list(params, f"{prefix}.ffn", ("tanh", "linear")))
    return ag.layer_norm(H + ff, p("ln2.g"), p("ln2.b"))


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")


def train_loop(params: dict[str, Tensor], batch_loss: Callable[[np.ndarray], Tensor], n: int, *,
               lr: float, batch: int, epochs: int, seed: int, tol: float = 1e-4,
               optimizer: ag.Adam | None = None, label: str = "model") -> TrainHistory:
    """Seeded minibatch Adam; stops early when the epoch loss improves by less than ``tol``."""
    if n == 0:
        raise ConfigError(f"{label}: empty training set")
    rng = np.random.default_rng(seed)
    opt = optimizer if optimizer is not None else ag.Adam(params, lr=lr)
    hist = TrainHistory()
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            opt.zero_grad()
            with ag.Tape() as tape:
                loss = batch_loss(idx)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"{label}: non-finite loss at epoch {epoch}, step {hist.steps}")
            tape.backward(loss)
            opt.step()
            hist.steps += 1
            total += value * len(idx)
        hist.epoch_loss.append(total / n)
        log.debug("%s epoch %d loss %.6f", label, epoch, hist.epoch_loss[-1])
        if len(hist.epoch_loss) > 1 and hist.epoch_loss[-2] - hist.epoch_loss[-1] < tol:
            break
    return hist
