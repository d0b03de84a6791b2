"""Time-split experiment protocols and their reports.

Every cell is one (method, seed, feature set).  Knowledge-base methods share
one encoder and knowledge base per (seed, feature set).  A failing cell is
recorded with its error and the remaining cells still run.
"""
from __future__ import annotations

import json
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autograd as ag
from .backbone import RecConfig, RecModel, knowledge_for, predict, train_rec
from .bench import bench_retrieval
from .data import Dataset, partition
from .encoder import EncoderConfig, train_encoder
from .errors import ConfigError
from .kbase import generate_kb, kb_stats
from .layers import train_loop
from .metrics import auc, logloss
from .synth import SynthConfig, gen_synthetic

log = logging.getLogger(__name__)

BASELINES = ("fixed_r", "fixed_a", "incremental", "random_coreset")
KB_METHODS = ("d2k_base", "d2k_adp_share", "d2k_adp_sep", "d2k_adp_small", "direct_only", "direct_only_adp")
METHODS = BASELINES + KB_METHODS

# method -> (mode, adaptation)
_KB_SETUP = {
    "d2k_base": ("concat", "none"),
    "d2k_adp_share": ("concat", "share"),
    "d2k_adp_sep": ("concat", "sep"),
    "d2k_adp_small": ("concat", "small"),
    "direct_only": ("direct", "none"),
    "direct_only_adp": ("direct", "share"),
}

# knowledge-base feature set of the default synthetic schema without the identity fields
FS_SMALL = ("user_segment", "user_interests", "item_category", "item_brand", "time_slot")


@dataclass
class ExperimentConfig:
    methods: tuple[str, ...] = METHODS
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data_seed: int = 0
    window_seconds: int | None = None
    p1: int = 4
    p2: int = 5
    gap: int = 0
    feature_sets: dict[str, tuple[str, ...] | None] = field(default_factory=lambda: {"full": None})
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    rec: RecConfig = field(default_factory=RecConfig)
    injection: str = "concat"
    coreset_fraction: float = 0.1
    incremental_epochs: int = 10
    incremental_tol: float = 1e-4
    bench_batch: int = 1024
    bench_batches: int = 20

    def validate(self) -> None:
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {METHODS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.injection not in ("concat", "tower_lr", "tower_mlp"):
            raise ConfigError(f"injection must be concat, tower_lr or tower_mlp, got {self.injection!r}")
        if not self.feature_sets:
            raise ConfigError("at least one knowledge-base feature set is required")
        if self.gap < 0 or self.gap > self.p1:
            raise ConfigError(f"gap must be in [0, p1], got {self.gap}")
        if not 0.0 <= self.coreset_fraction <= 1.0:
            raise ConfigError("coreset_fraction must be in [0, 1]")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["feature_sets"] = {k: list(v) if v else None for k, v in self.feature_sets.items()}
        return out


@dataclass
class CellResult:
    method: str
    seed: int
    feature_set: str | None
    gap: int
    status: str = "ok"
    auc: float = math.nan
    logloss: float = math.nan
    n_train: int = 0
    epochs: int = 0
    train_seconds: float = 0.0
    kb_entries: int | None = None
    kb_bytes: int | None = None
    encoder_seconds: float | None = None
    kb_build_seconds: float | None = None
    retrieval_ms: float | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class Summary:
    method: str
    feature_set: str | None
    n: int
    auc_mean: float
    auc_std: float
    logloss_mean: float
    logloss_std: float


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std(ddof=1)) if a.size >= 2 else math.nan


@dataclass
class ExperimentReport:
    config: dict
    records: list[CellResult]
    kb_stats: dict[str, dict] = field(default_factory=dict)
    partition: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def failed(self) -> list[CellResult]:
        return [r for r in self.records if not r.ok]

    def cells(self, method: str, feature_set: str | None = None) -> list[CellResult]:
        fs = self._fs(method, feature_set)
        return [r for r in self.records if r.method == method and r.feature_set == fs]

    def _fs(self, method: str, feature_set: str | None) -> str | None:
        if method not in KB_METHODS:
            return None
        if feature_set is None:
            return next(iter(self.config["feature_sets"]))
        return feature_set

    def summary(self) -> list[Summary]:
        keys = []
        for r in self.records:
            if (r.method, r.feature_set) not in keys:
                keys.append((r.method, r.feature_set))
        out = []
        for method, fs in keys:
            ok = [r for r in self.records if r.method == method and r.feature_set == fs and r.ok]
            am, asd = _mean_std([r.auc for r in ok])
            lm, lsd = _mean_std([r.logloss for r in ok])
            out.append(Summary(method, fs, len(ok), am, asd, lm, lsd))
        return out

    def mean_auc(self, method: str, feature_set: str | None = None) -> float:
        ok = [r.auc for r in self.cells(method, feature_set) if r.ok]
        if not ok:
            raise KeyError(f"no successful cells for {method!r} / {feature_set!r}")
        return float(np.mean(ok))

    def kb_entries(self, feature_set: str) -> int:
        """Mean entry count over seeds for one feature set."""
        vals = [s["entries"] for k, s in self.kb_stats.items() if k.split("/")[0] == feature_set]
        if not vals:
            raise KeyError(f"no knowledge base built for feature set {feature_set!r}")
        return int(round(np.mean(vals)))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in self.records)

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "partition": self.partition, "kb_stats": self.kb_stats,
                           "summary": [asdict(s) for s in self.summary()],
                           "records": [asdict(r) for r in self.records], "seconds": self.seconds},
                          sort_keys=True, indent=1)

    def table(self) -> str:
        head = f"{'method':<18}{'features':<10}{'n':>3}  {'AUC':>17}  {'LogLoss':>17}"
        lines = [head, "-" * len(head)]
        for s in self.summary():
            lines.append(f"{s.method:<18}{s.feature_set or '-':<10}{s.n:>3}  "
                         f"{s.auc_mean:.4f} ± {s.auc_std:.4f}  {s.logloss_mean:.4f} ± {s.logloss_std:.4f}")
        for key, st in sorted(self.kb_stats.items()):
            extra = f", retrieval {st['retrieval_ms']:.2f} ms/batch" if st.get("retrieval_ms") is not None else ""
            lines.append(f"kb {key}: {st['entries']} entries, {st['bytes']} bytes, "
                         f"build {st['build_seconds'] / 60:.3f} min{extra}")
        for r in self.failed:
            lines.append(f"FAILED {r.method} seed={r.seed} features={r.feature_set}: {r.error}")
        return "\n".join(lines)


def _evaluate(model: RecModel, test: Dataset, z) -> tuple[float, float]:
    p = predict(model, test, knowledge=z)
    return auc(p, test.labels), logloss(p, test.labels)


def _train_incremental(blocks: Sequence[Dataset], config: RecConfig, vocab_sizes: dict,
                       epochs: int, tol: float) -> tuple[RecModel, int]:
    """Plain model trained block after block, each until its loss plateaus."""
    schema = blocks[0].schema
    model = RecModel(schema, vocab_sizes, "plain", config)
    opt = ag.Adam(model.params, lr=config.lr)
    total_epochs = 0
    for b, block in enumerate(blocks):
        hist = train_loop(model.params, lambda idx, d=block: model.loss(d.take(idx)), len(block),
                          lr=config.lr, batch=config.batch, epochs=epochs, seed=config.seed + 7 + b,
                          tol=tol, optimizer=opt, label=f"incremental[block {b + 1}]")
        total_epochs += len(hist.epoch_loss)
    return model, total_epochs


def run_experiment(config: ExperimentConfig | None = None, data: Dataset | None = None) -> ExperimentReport:
    """Run every selected (method, seed) cell; knowledge-base methods once per feature set."""
    config = config or ExperimentConfig()
    config.validate()
    t_start = time.perf_counter()
    if data is None:
        data = gen_synthetic(config.synth, seed=config.data_seed).dataset
        window = config.window_seconds or config.synth.window_seconds
    else:
        if config.window_seconds is None:
            raise ConfigError("window_seconds is required with external data")
        window = config.window_seconds
    # a gap of G windows moves the end of the old data back by G; train and test stay put
    part = partition(data, window, config.p1 - config.gap, config.p2, config.gap)
    old, train, test = part.old, part.train, part.test
    vocab_sizes = data.vocab_sizes()
    report = ExperimentReport(config.as_dict(), [])
    report.partition = {"blocks": part.n_blocks, "p1": part.p1, "p2": part.p2, "gap": part.gap,
                        "old": len(old) if old is not None else 0, "train": len(train), "test": len(test),
                        "dropped": len(part.dropped) if part.dropped is not None else 0}

    kb_cache: dict[tuple[int, str], dict] = {}

    def knowledge(seed: int, fs_name: str) -> dict:
        key = (seed, fs_name)
        if key not in kb_cache:
            if old is None:
                raise ConfigError("knowledge-base methods need old data (p1 - gap >= 1)")
            schema = data.schema.with_kb_subset(config.feature_sets[fs_name])
            t0 = time.perf_counter()
            enc = train_encoder(old.with_schema(schema), replace(config.encoder, seed=seed), vocab_sizes)
            t1 = time.perf_counter()
            kb = generate_kb(old.with_schema(schema), enc)
            t2 = time.perf_counter()
            entry = {"schema": schema, "kb": kb, "encoder_seconds": t1 - t0, "build_seconds": t2 - t1,
                     "z_train": knowledge_for(train.with_schema(schema), kb, schema),
                     "z_test": knowledge_for(test.with_schema(schema), kb, schema)}
            st = kb_stats(kb, schema).as_dict()
            st["build_seconds"] = t2 - t1
            st["encoder_seconds"] = t1 - t0
            st["retrieval_ms"] = None
            if config.bench_batches > 0:
                st["retrieval_ms"] = bench_retrieval(kb, test.with_schema(schema), config.bench_batch,
                                                     config.bench_batches).median_ms
            report.kb_stats[f"{fs_name}/seed{seed}"] = st
            entry["stats"] = st
            kb_cache[key] = entry
        return kb_cache[key]

    cells = []
    for method in config.methods:
        names = list(config.feature_sets) if method in KB_METHODS else [None]
        for fs_name in names:
            for seed in config.seeds:
                cells.append((method, seed, fs_name))

    for method, seed, fs_name in cells:
        rec = CellResult(method, seed, fs_name, config.gap)
        rcfg = replace(config.rec, seed=seed)
        try:
            t0 = time.perf_counter()
            if method in KB_METHODS:
                k = knowledge(seed, fs_name)
                mode, adaptation = _KB_SETUP[method]
                if mode == "concat":
                    mode = config.injection
                schema = k["schema"]
                model = train_rec(train.with_schema(schema), k["kb"], mode, replace(rcfg, adaptation=adaptation),
                                  vocab_sizes=vocab_sizes, knowledge=k["z_train"], schema=schema)
                rec.n_train = len(train)
                rec.epochs = len(model.history.epoch_loss)
                rec.auc, rec.logloss = _evaluate(model, test.with_schema(schema), k["z_test"])
                rec.kb_entries = k["stats"]["entries"]
                rec.kb_bytes = k["stats"]["bytes"]
                rec.encoder_seconds = k["encoder_seconds"]
                rec.kb_build_seconds = k["build_seconds"]
                rec.retrieval_ms = k["stats"]["retrieval_ms"]
            elif method == "incremental":
                blocks = [b for b in part.blocks[:part.p1] + part.blocks[part.p1 + part.gap:part.p2] if len(b)]
                model, rec.epochs = _train_incremental(blocks, rcfg, vocab_sizes, config.incremental_epochs,
                                                       config.incremental_tol)
                rec.n_train = sum(len(b) for b in blocks)
                rec.auc, rec.logloss = _evaluate(model, test, None)
            else:
                if method == "fixed_r":
                    tr = train
                elif method == "fixed_a":
                    tr = train if old is None else Dataset.concat([old, train])
                else:  # random_coreset
                    tr = train
                    if old is not None and config.coreset_fraction > 0:
                        rng = np.random.default_rng(seed)
                        size = int(round(config.coreset_fraction * len(old)))
                        pick = np.sort(rng.choice(len(old), size=size, replace=False))
                        tr = Dataset.concat([old.take(pick), train])
                model = train_rec(tr, None, "plain", rcfg, vocab_sizes=vocab_sizes)
                rec.n_train = len(tr)
                rec.epochs = len(model.history.epoch_loss)
                rec.auc, rec.logloss = _evaluate(model, test, None)
            rec.train_seconds = time.perf_counter() - t0
        except Exception as exc:  # recorded; the other cells still run
            rec.status = "failed"
            rec.error = f"{type(exc).__name__}: {exc}"
            log.error("cell %s seed=%s features=%s failed\n%s", method, seed, fs_name, traceback.format_exc())
        log.info("%s seed=%d features=%s auc=%.4f", method, seed, fs_name, rec.auc)
        report.records.append(rec)
    report.seconds = time.perf_counter() - t_start
    return report
