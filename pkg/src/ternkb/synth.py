"""Synthetic click logs whose labels are driven by latent ternary effects.

Every combination of one user field, one item field and one context field
gets an effect table ``theta[(i, j, k)][u, v, c] ~ Normal(0, sigma^2)``.
A sample's click logit is ``bias`` plus, for each field triple, the effect
of its values (averaged over the expansions of multi-valued fields).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, FeatureSchema, Field
from .errors import ConfigError


@dataclass(frozen=True)
class SynthField:
    name: str
    side: str
    cardinality: int
    kind: str = "single"
    max_len: int = 1


def default_fields(n_users: int = 200, n_items: int = 200, n_ctx: int = 8) -> tuple[SynthField, ...]:
    return (
        SynthField("user_id", "user", n_users),
        SynthField("user_segment", "user", 6),
        SynthField("user_interests", "user", 8, kind="multi", max_len=3),
        SynthField("item_id", "item", n_items),
        SynthField("item_category", "item", 6),
        SynthField("item_brand", "item", 12),
        SynthField("time_slot", "context", n_ctx),
    )


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    The first user field is the user identity and the first item field the
    item identity; the other user/item fields are fixed attributes of that
    user/item.  Context fields are drawn per sample.
    """

    n_users: int = 200
    n_items: int = 200
    n_ctx: int = 8
    fields: tuple[SynthField, ...] | None = None
    n_samples: int = 100_000
    n_windows: int = 6
    window_seconds: int = 86_400
    drift_rate: float = 0.0
    sigma: float = 0.6
    bias: float = -1.0
    start_time: int = 1_600_000_000

    def resolved_fields(self) -> tuple[SynthField, ...]:
        fs = self.fields if self.fields is not None else default_fields(self.n_users, self.n_items, self.n_ctx)
        by_side = {s: [f for f in fs if f.side == s] for s in ("user", "item", "context")}
        for s, lst in by_side.items():
            if not lst:
                raise ConfigError(f"synthetic config needs a {s} field")
        if by_side["user"][0].kind != "single" or by_side["item"][0].kind != "single":
            raise ConfigError("the identity field of each side must be single-valued")
        # identity cardinalities follow n_users / n_items / n_ctx
        out = []
        for f in fs:
            if f is by_side["user"][0]:
                f = replace(f, cardinality=self.n_users)
            elif f is by_side["item"][0]:
                f = replace(f, cardinality=self.n_items)
            elif f is by_side["context"][0]:
                f = replace(f, cardinality=self.n_ctx)
            if f.cardinality < 1 or (f.kind == "multi" and f.max_len < 1):
                raise ConfigError(f"bad synthetic field {f}")
            out.append(f)
        return tuple(out)

    def schema(self, kb_subset=None) -> FeatureSchema:
        fs = self.resolved_fields()
        mk = lambda side: tuple(Field(f.name, side, f.kind) for f in fs if f.side == side)
        return FeatureSchema(mk("user"), mk("item"), mk("context"),
                             tuple(kb_subset) if kb_subset is not None else None)


@dataclass
class SynthData:
    dataset: Dataset
    theta: list[dict[tuple[int, int, int], np.ndarray]]
    config: SynthConfig
    window_of: np.ndarray = field(repr=False, default=None)

    @property
    def schema(self) -> FeatureSchema:
        return self.dataset.schema

    def true_logits(self, data: Dataset | None = None, window: np.ndarray | None = None) -> np.ndarray:
        """Generator logits for ``data`` (defaults to the generated set)."""
        data = self.dataset if data is None else data
        if window is None:
            window = (data.timestamps - self.config.start_time) // self.config.window_seconds
            window = np.clip(window, 0, len(self.theta) - 1)
        return ternary_logits(data, self.theta, window, self.config.bias)


def ternary_logits(data: Dataset, theta: list[dict], window: np.ndarray, bias: float) -> np.ndarray:
    schema = data.schema
    sides = schema.sides()
    out = np.full(len(data), float(bias))
    for (i, j, k) in theta[0]:
        vu, lu = data.field_values(sides[0][i].name)
        vv, lv = data.field_values(sides[1][j].name)
        vc, lc = data.field_values(sides[2][k].name)
        mu = np.arange(vu.shape[1])[None, :] < lu[:, None]
        mv = np.arange(vv.shape[1])[None, :] < lv[:, None]
        mc = np.arange(vc.shape[1])[None, :] < lc[:, None]
        mask = mu[:, :, None, None] & mv[:, None, :, None] & mc[:, None, None, :]
        count = (lu * lv * lc).astype(np.float64)
        acc = np.zeros(len(data))
        for w in np.unique(window):
            rows = np.nonzero(window == w)[0]
            tab = theta[int(w)][(i, j, k)]
            vals = tab[vu[rows][:, :, None, None], vv[rows][:, None, :, None], vc[rows][:, None, None, :]]
            acc[rows] = np.where(mask[rows], vals, 0.0).sum(axis=(1, 2, 3))
        out += acc / count
    return out


def gen_synthetic(config: SynthConfig, seed: int = 0) -> SynthData:
    if config.n_samples < 1 or config.n_windows < 1 or config.window_seconds < 1:
        raise ConfigError("n_samples, n_windows and window_seconds must be positive")
    if not 0.0 <= config.drift_rate <= 1.0:
        raise ConfigError("drift_rate must be in [0, 1]")
    if config.sigma < 0:
        raise ConfigError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    fs = config.resolved_fields()
    schema = config.schema()
    n = config.n_samples

    # entity attributes are fixed per user / item
    def attr_table(f: SynthField, n_entities: int):
        if f.kind == "multi":
            lens = rng.integers(1, f.max_len + 1, size=n_entities + 1)
            vals = rng.integers(1, f.cardinality + 1, size=(n_entities + 1, f.max_len))
            vals[np.arange(f.max_len)[None, :] >= lens[:, None]] = 0
            return vals, lens
        return rng.integers(1, f.cardinality + 1, size=n_entities + 1), None

    user_f = [f for f in fs if f.side == "user"]
    item_f = [f for f in fs if f.side == "item"]
    ctx_f = [f for f in fs if f.side == "context"]
    tables = {}
    for f in user_f[1:]:
        tables[f.name] = attr_table(f, config.n_users)
    for f in item_f[1:]:
        tables[f.name] = attr_table(f, config.n_items)

    theta0 = {}
    for i, fu in enumerate(user_f):
        for j, fv in enumerate(item_f):
            for k, fc in enumerate(ctx_f):
                theta0[(i, j, k)] = rng.normal(0.0, config.sigma,
                                               size=(fu.cardinality + 1, fv.cardinality + 1, fc.cardinality + 1))
    theta = [theta0]
    for _ in range(1, config.n_windows):
        prev = theta[-1]
        nxt = {}
        for key, tab in prev.items():
            tab = tab.copy()
            if config.drift_rate > 0:
                redraw = rng.random(tab.shape) < config.drift_rate
                tab[redraw] = rng.normal(0.0, config.sigma, size=int(redraw.sum()))
            nxt[key] = tab
        theta.append(nxt)

    users = rng.integers(1, config.n_users + 1, size=n)
    items = rng.integers(1, config.n_items + 1, size=n)
    span = config.n_windows * config.window_seconds
    ts = np.sort(rng.integers(0, span, size=n)) + config.start_time

    columns, lengths = {}, {}
    for f in fs:
        if f is user_f[0]:
            columns[f.name] = users
        elif f is item_f[0]:
            columns[f.name] = items
        elif f.side == "context":
            if f.kind == "multi":
                ln = rng.integers(1, f.max_len + 1, size=n)
                v = rng.integers(1, f.cardinality + 1, size=(n, f.max_len))
                v[np.arange(f.max_len)[None, :] >= ln[:, None]] = 0
                columns[f.name], lengths[f.name] = v, ln
            else:
                columns[f.name] = rng.integers(1, f.cardinality + 1, size=n)
        else:
            owner = users if f.side == "user" else items
            vals, lens = tables[f.name]
            columns[f.name] = vals[owner]
            if lens is not None:
                lengths[f.name] = lens[owner]

    window = (ts - config.start_time) // config.window_seconds
    dataset = Dataset(schema, columns, lengths, np.zeros(n, dtype=np.int64), ts)
    logits = ternary_logits(dataset, theta, window, config.bias)
    labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.int64)
    dataset.labels = labels
    return SynthData(dataset, theta, config, window)
