"""Command-line interface: ``ternkb <command> ...``.

Log-reading commands share ``--logs``, ``--schema`` and ``--vocab`` plus the
partition flags ``--window-seconds``, ``--p1``, ``--p2`` and ``--gap``.  A
vocabulary path that does not exist yet is built from the logs and saved
there, so later commands map tokens to the same IDs.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .backbone import RecConfig, RecModel, predict, train_rec
from .data import Dataset, FeatureSchema, load_logs, load_vocab, partition, save_vocab, write_logs
from .encoder import EncoderConfig, EncoderModel, train_encoder
from .errors import TernKBError
from .experiment import FS_SMALL, METHODS, ExperimentConfig, run_experiment
from .kbase import generate_kb, kb_stats, load_kb, save_kb, update_kb
from .metrics import auc, logloss
from .synth import SynthConfig, gen_synthetic
from .utilize import ADAPTATIONS

log = logging.getLogger("ternkb")


def _csv(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_data_args(p: argparse.ArgumentParser, partitioned: bool = True) -> None:
    p.add_argument("--logs", required=True, help="TSV log file")
    p.add_argument("--schema", required=True, help="schema file")
    p.add_argument("--vocab", help="vocabulary file (created from the logs when missing)")
    p.add_argument("--kb-subset", type=_csv, help="comma-separated knowledge-base fields")
    if partitioned:
        p.add_argument("--window-seconds", type=int, default=86_400)
        p.add_argument("--p1", type=int, default=4)
        p.add_argument("--p2", type=int, default=5)
        p.add_argument("--gap", type=int, default=0)


def _add_encoder_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("encoder")
    d = EncoderConfig()
    g.add_argument("--d", type=int, default=d.d)
    g.add_argument("--d-k", type=int, default=d.d_k)
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--hidden", type=int, default=d.hidden)
    g.add_argument("--enc-lr", type=float, default=d.lr)
    g.add_argument("--enc-batch", type=int, default=d.batch)
    g.add_argument("--enc-epochs", type=int, default=d.epochs)


def _add_rec_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("recommender")
    d = RecConfig()
    g.add_argument("--injection", choices=("concat", "tower_lr", "tower_mlp"), default="concat")
    g.add_argument("--adaptation", choices=ADAPTATIONS, default=d.adaptation)
    g.add_argument("--adapt-layers", type=int, default=d.adapt_layers)
    g.add_argument("--rec-d", type=int, default=d.d)
    g.add_argument("--no-fm", action="store_true", help="drop the pairwise interaction term")
    g.add_argument("--rec-lr", type=float, default=d.lr)
    g.add_argument("--rec-batch", type=int, default=d.batch)
    g.add_argument("--rec-epochs", type=int, default=d.epochs)


def _encoder_config(a, seed: int) -> EncoderConfig:
    return EncoderConfig(d=a.d, d_k=a.d_k, heads=a.heads, hidden=a.hidden, lr=a.enc_lr, batch=a.enc_batch,
                         epochs=a.enc_epochs, seed=seed)


def _rec_config(a, seed: int) -> RecConfig:
    return RecConfig(d=a.rec_d, fm=not a.no_fm, adaptation=a.adaptation, adapt_layers=a.adapt_layers,
                     lr=a.rec_lr, batch=a.rec_batch, epochs=a.rec_epochs, seed=seed)


def _load_data(a) -> Dataset:
    schema = FeatureSchema.load(a.schema)
    if a.kb_subset:
        schema = schema.with_kb_subset(a.kb_subset)
    vocab = None
    if a.vocab and Path(a.vocab).exists():
        vocab = load_vocab(a.vocab)
    data, vocab = load_logs(a.logs, schema, vocab)
    if a.vocab and not Path(a.vocab).exists():
        save_vocab(a.vocab, vocab)
    return data


def _split(a, data: Dataset, name: str) -> Dataset:
    part = partition(data, a.window_seconds, a.p1 - a.gap, a.p2, a.gap)
    out = {"old": part.old, "train": part.train, "test": part.test}
    if name == "all":
        out["all"] = Dataset.concat([d for d in (part.old, part.train) if d is not None])
    if out[name] is None:
        raise TernKBError(f"the {name} split is empty")
    return out[name]


def _emit(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(a) -> int:
    cfg = SynthConfig(n_users=a.n_users, n_items=a.n_items, n_ctx=a.n_ctx, n_samples=a.n_samples,
                      n_windows=a.n_windows, drift_rate=a.drift_rate, sigma=a.sigma, bias=a.bias)
    sd = gen_synthetic(cfg, seed=a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_logs(out / "logs.tsv", sd.dataset)
    (out / "schema.txt").write_text(sd.dataset.schema.to_text(), encoding="utf-8")
    _, vocab = load_logs(out / "logs.tsv", sd.dataset.schema)
    save_vocab(out / "vocab.tsv", vocab)
    _emit({"samples": len(sd.dataset), "ctr": float(sd.dataset.labels.mean()), "dir": str(out)})
    return 0


def cmd_train_encoder(a) -> int:
    data = _load_data(a)
    old = _split(a, data, a.split)
    model = train_encoder(old, _encoder_config(a, a.seed), data.vocab_sizes())
    model.save(a.out)
    _emit({"samples": len(old), "epoch_loss": model.history.epoch_loss, "out": a.out})
    return 0


def cmd_kb(a) -> int:
    if a.kb_command == "stats":
        kb = load_kb(a.kb)
        schema = FeatureSchema.load(a.schema) if a.schema else None
        if schema is not None and a.kb_subset:
            schema = schema.with_kb_subset(a.kb_subset)
        _emit(kb_stats(kb, schema).as_dict())
        return 0
    data = _load_data(a)
    encoder = EncoderModel.load(a.encoder)
    src = _split(a, data, a.split).with_schema(encoder.schema)
    if a.kb_command == "build":
        kb = generate_kb(src, encoder)
    else:
        kb = update_kb(load_kb(a.kb), src, encoder, a.policy)
    save_kb(kb, a.out)
    _emit(kb_stats(kb, encoder.schema).as_dict() | {"out": a.out})
    return 0


def cmd_train_rec(a) -> int:
    data = _load_data(a)
    train = _split(a, data, a.split)
    kb = load_kb(a.kb) if a.kb else None
    if a.direct:
        mode = "direct"
    else:
        mode = "plain" if kb is None else a.injection
    model = train_rec(train, kb, mode, _rec_config(a, a.seed), vocab_sizes=data.vocab_sizes())
    model.save(a.out)
    _emit({"mode": mode, "samples": len(train), "epoch_loss": model.history.epoch_loss, "out": a.out})
    return 0


def cmd_eval(a) -> int:
    data = _load_data(a)
    test = _split(a, data, a.split)
    model = RecModel.load(a.model)
    kb = load_kb(a.kb) if a.kb else None
    p = predict(model, test.with_schema(model.schema), kb)
    _emit({"mode": model.mode, "samples": len(test), "auc": auc(p, test.labels),
           "logloss": logloss(p, test.labels)})
    return 0


def cmd_experiment(a) -> int:
    synth = SynthConfig(n_users=a.n_users, n_items=a.n_items, n_ctx=a.n_ctx, n_samples=a.n_samples,
                        n_windows=a.n_windows, drift_rate=a.drift_rate, sigma=a.sigma, bias=a.bias)
    feature_sets: dict = {"full": None}
    if a.fs_small:
        feature_sets["small"] = FS_SMALL
    for spec in a.feature_set or []:
        name, _, names = spec.partition("=")
        feature_sets[name] = tuple(_csv(names))
    cfg = ExperimentConfig(
        methods=tuple(a.methods), seeds=tuple(range(a.seeds)) if a.seed_list is None else tuple(a.seed_list),
        synth=synth, data_seed=a.data_seed, p1=a.p1, p2=a.p2, gap=a.gap, feature_sets=feature_sets,
        encoder=_encoder_config(a, 0), rec=_rec_config(a, 0), injection=a.injection,
        window_seconds=a.window_seconds, bench_batches=a.bench_batches)
    data = None
    if a.logs:
        if not a.schema:
            raise TernKBError("--logs needs --schema")
        data = _load_data(a)
        if cfg.window_seconds is None:
            cfg = replace(cfg, window_seconds=86_400)
    report = run_experiment(cfg, data)
    print(report.table())
    if a.jsonl:
        Path(a.jsonl).write_text(report.to_jsonl(), encoding="utf-8")
    if a.json:
        Path(a.json).write_text(report.to_json(), encoding="utf-8")
    return 1 if report.failed else 0


def cmd_bench(a) -> int:
    from .bench import bench_retrieval, random_dataset, random_kb
    if a.kb:
        kb = load_kb(a.kb)
        data = _load_data(a)
        schema = data.schema
    else:
        schema = FeatureSchema.build([f"u{i}" for i in range(a.user_fields)], [f"v{i}" for i in range(a.item_fields)],
                                     [f"c{i}" for i in range(a.context_fields)])
        sizes = {f.name: a.cardinality for f in schema.fields}
        data = random_dataset(schema, sizes, (a.batches + 1) * a.batch, seed=a.seed)
        kb = random_kb(schema, sizes, a.entries, seed=a.seed, cover=data.take(range(0, len(data), 2)))
    res = bench_retrieval(kb, data, a.batch, a.batches, schema=schema, backend=a.backend)
    out = res.as_dict()
    out.pop("times_ms")
    _emit(out)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_synth_args(p: argparse.ArgumentParser) -> None:
    d = SynthConfig()
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-users", type=int, default=d.n_users)
    g.add_argument("--n-items", type=int, default=d.n_items)
    g.add_argument("--n-ctx", type=int, default=d.n_ctx)
    g.add_argument("--n-samples", type=int, default=d.n_samples)
    g.add_argument("--n-windows", type=int, default=d.n_windows)
    g.add_argument("--drift-rate", type=float, default=d.drift_rate)
    g.add_argument("--sigma", type=float, default=d.sigma)
    g.add_argument("--bias", type=float, default=d.bias)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ternkb", description="Ternary knowledge base for click prediction.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic logs, schema and vocabulary")
    _add_synth_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-encoder", help="train the knowledge encoder on the old split")
    _add_data_args(p)
    _add_encoder_args(p)
    p.add_argument("--split", choices=("old", "train", "all"), default="old")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_encoder)

    p = sub.add_parser("kb", help="build, update or inspect a knowledge base")
    kb_sub = p.add_subparsers(dest="kb_command", required=True)
    q = kb_sub.add_parser("build")
    _add_data_args(q)
    q.add_argument("--encoder", required=True)
    q.add_argument("--split", choices=("old", "train", "all"), default="old")
    q.add_argument("--out", required=True)
    q = kb_sub.add_parser("update")
    _add_data_args(q)
    q.add_argument("--kb", required=True, help="existing knowledge base")
    q.add_argument("--encoder", required=True, help="encoder trained on the new data")
    q.add_argument("--policy", choices=("rp", "ap"), required=True)
    q.add_argument("--split", choices=("old", "train", "all"), default="train")
    q.add_argument("--out", required=True)
    q = kb_sub.add_parser("stats")
    q.add_argument("--kb", required=True)
    q.add_argument("--schema", help="schema file, for field names in the histogram")
    q.add_argument("--kb-subset", type=_csv)
    p.set_defaults(func=cmd_kb)

    p = sub.add_parser("train-rec", help="train a click model (plain without --kb)")
    _add_data_args(p)
    _add_rec_args(p)
    p.add_argument("--kb")
    p.add_argument("--direct", action="store_true", help="predict from knowledge alone")
    p.add_argument("--split", choices=("train", "all"), default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rec)

    p = sub.add_parser("eval", help="AUC and log loss of a trained model")
    _add_data_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--kb")
    p.add_argument("--split", choices=("old", "train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run method x seed cells and report")
    _add_synth_args(p)
    _add_encoder_args(p)
    _add_rec_args(p)
    p.add_argument("--logs", help="use these logs instead of synthetic data")
    p.add_argument("--schema")
    p.add_argument("--vocab")
    p.add_argument("--kb-subset", type=_csv, help=argparse.SUPPRESS)
    p.add_argument("--methods", type=_csv, default=list(METHODS), help=f"subset of {','.join(METHODS)}")
    p.add_argument("--seeds", type=int, default=5, help="run seeds 0..N-1")
    p.add_argument("--seed-list", type=lambda s: [int(x) for x in _csv(s)], help="explicit seeds")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--window-seconds", type=int)
    p.add_argument("--p1", type=int, default=4)
    p.add_argument("--p2", type=int, default=5)
    p.add_argument("--gap", type=int, default=0)
    p.add_argument("--fs-small", action="store_true", help="add a feature set without the identity fields")
    p.add_argument("--feature-set", action="append", help="NAME=field,field,... (repeatable)")
    p.add_argument("--bench-batches", type=int, default=20, help="retrieval timing batches, 0 to skip")
    p.add_argument("--jsonl", help="write one record per cell here")
    p.add_argument("--json", help="write the full report here")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("bench", help="retrieval latency")
    p.add_argument("--kb", help="knowledge base file (else a random one is built)")
    p.add_argument("--logs")
    p.add_argument("--schema")
    p.add_argument("--vocab")
    p.add_argument("--kb-subset", type=_csv)
    p.add_argument("--entries", type=int, default=1_000_000)
    p.add_argument("--user-fields", type=int, default=3)
    p.add_argument("--item-fields", type=int, default=3)
    p.add_argument("--context-fields", type=int, default=4)
    p.add_argument("--cardinality", type=int, default=5000)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--backend", choices=("compiled", "python"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if a.command == "bench" and a.kb and not (a.logs and a.schema):
        ap.error("bench --kb needs --logs and --schema for the queries")
    try:
        return a.func(a)
    except (TernKBError, ValueError, OSError) as exc:
        print(f"ternkb: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
