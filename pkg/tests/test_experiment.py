import json
import math

import pytest

from ternkb.backbone import RecConfig
from ternkb.encoder import EncoderConfig
from ternkb.errors import ConfigError
from ternkb.experiment import METHODS, ExperimentConfig, run_experiment
from ternkb.synth import SynthConfig

TINY = SynthConfig(n_users=20, n_items=20, n_ctx=3, n_samples=2500, n_windows=3)


def _cfg(**kw):
    base = dict(methods=METHODS, seeds=(0, 1), synth=TINY, p1=1, p2=2,
                encoder=EncoderConfig(d=4, d_k=2, epochs=1), rec=RecConfig(d=4, hidden=(8,), epochs=1),
                incremental_epochs=2, bench_batch=64, bench_batches=2)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def report():
    return run_experiment(_cfg(feature_sets={"full": None, "small": ("user_segment", "item_category", "time_slot")}))


def test_every_cell_runs(report):
    assert not report.failed
    kb_methods = [m for m in METHODS if m.startswith(("d2k", "direct"))]
    assert len(report.records) == 2 * (len(METHODS) - len(kb_methods)) + 2 * 2 * len(kb_methods)
    for r in report.records:
        assert 0 <= r.auc <= 1 and r.logloss > 0 and r.n_train > 0


def test_training_set_sizes(report):
    p = report.partition
    n = {m: report.cells(m)[0].n_train for m in ("fixed_r", "fixed_a", "random_coreset", "incremental")}
    assert n["fixed_r"] == p["train"]
    assert n["fixed_a"] == p["train"] + p["old"]
    assert n["random_coreset"] == p["train"] + round(0.1 * p["old"])
    assert n["incremental"] == p["train"] + p["old"]


def test_summary_and_stats(report):
    s = {(x.method, x.feature_set): x for x in report.summary()}
    assert s[("fixed_r", None)].n == 2 and not math.isnan(s[("fixed_r", None)].auc_std)
    assert report.kb_entries("small") < report.kb_entries("full")
    st = report.kb_stats["full/seed0"]
    assert st["entries"] == sum(st["histogram"].values())
    assert st["retrieval_ms"] > 0
    cell = report.cells("d2k_base", "full")[0]
    assert cell.kb_entries == st["entries"] and cell.kb_bytes == st["bytes"]


def test_report_formats(report):
    lines = report.to_jsonl().splitlines()
    assert len(lines) == len(report.records)
    rec = json.loads(lines[0])
    assert {"method", "seed", "auc", "logloss", "train_seconds", "status"} <= set(rec)
    full = json.loads(report.to_json())
    assert full["partition"]["p1"] == 1 and len(full["summary"]) == len(report.summary())
    text = report.table()
    assert "d2k_adp_share" in text and "entries" in text and "±" in text


def test_rerun_is_bit_exact(report):
    again = run_experiment(_cfg(methods=("fixed_r", "d2k_adp_share", "incremental"), seeds=(1,),
                                feature_sets={"full": None, "small": ("user_segment", "item_category", "time_slot")}))
    for r in again.records:
        orig = [o for o in report.records if (o.method, o.seed, o.feature_set) == (r.method, r.seed, r.feature_set)]
        assert orig[0].auc == r.auc and orig[0].logloss == r.logloss


def test_no_old_data_fixed_windows_agree_and_kb_cells_fail():
    rep = run_experiment(_cfg(methods=("fixed_r", "fixed_a", "d2k_base"), seeds=(0,), p1=0, p2=1))
    (r,), (a,) = rep.cells("fixed_r"), rep.cells("fixed_a")
    assert r.auc == a.auc and r.logloss == a.logloss
    (k,) = rep.cells("d2k_base")
    assert k.status == "failed" and "old data" in k.error
    assert rep.failed == [k]
    assert "FAILED d2k_base" in rep.table()


def test_gap_keeps_train_and_test():
    base = run_experiment(_cfg(methods=("fixed_r",), seeds=(0,), p1=2, p2=3,
                               synth=SynthConfig(n_users=20, n_items=20, n_ctx=3, n_samples=2500, n_windows=4)))
    gap = run_experiment(_cfg(methods=("fixed_r",), seeds=(0,), p1=2, p2=3, gap=1,
                              synth=SynthConfig(n_users=20, n_items=20, n_ctx=3, n_samples=2500, n_windows=4)))
    assert base.partition["train"] == gap.partition["train"]
    assert base.partition["test"] == gap.partition["test"]
    assert gap.partition["old"] < base.partition["old"]
    assert base.records[0].auc == gap.records[0].auc


def test_config_validation():
    for bad in (dict(methods=("magic",)), dict(seeds=()), dict(injection="sum"), dict(feature_sets={}),
                dict(gap=5), dict(coreset_fraction=2.0)):
        with pytest.raises(ConfigError):
            run_experiment(_cfg(**bad))
