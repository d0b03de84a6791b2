"""Acceptance criteria, each printed as one PASS/FAIL line.

The experiment criteria share two 5-seed runs on the default synthetic
config: one with no gap (full and identity-free feature sets) and one with
a one-window gap.
"""
import itertools
import time

import numpy as np
import pytest

from ternkb import autograd as ag
from ternkb import kernels
from ternkb.backbone import RecConfig, RecModel
from ternkb.bench import bench_retrieval, random_dataset, random_kb
from ternkb.data import Dataset, FeatureSchema
from ternkb.encoder import EncoderConfig, EncoderModel
from ternkb.errors import FormatError
from ternkb.experiment import FS_SMALL, ExperimentConfig, run_experiment
from ternkb.kbase import KnowledgeBase, generate_kb, kb_from_bytes, load_kb, merge_kb, save_kb
from ternkb.metrics import auc, auc_pairwise
from ternkb.synth import SynthConfig, gen_synthetic
from ternkb.utilize import AdaptationUnit, adapt, gen_queries, inject_concat, retrieve

from conftest import make_samples

RESULTS = []

EXP_METHODS = ("fixed_r", "fixed_a", "d2k_base", "d2k_adp_share", "direct_only", "direct_only_adp")


def verdict(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def run_g0():
    return run_experiment(ExperimentConfig(methods=EXP_METHODS, feature_sets={"full": None, "small": FS_SMALL}))


@pytest.fixture(scope="module")
def run_g1():
    return run_experiment(ExperimentConfig(methods=EXP_METHODS, gap=1))


def _split_keys(data, schema):
    keys = set()
    iu, iv, ic = schema.kb_indices()
    for s in data:
        per = (s.user_values, s.item_values, s.context_values)
        vals = lambda side, i: per[side][i] if isinstance(per[side][i], tuple) else (per[side][i],)
        for i in iu:
            for j in iv:
                for k in ic:
                    for a, b, c in itertools.product(vals(0, i), vals(1, j), vals(2, k)):
                        keys.add((i, a, j, b, k, c))
    return keys


def test_c01_gradient_integrity():
    t0 = time.perf_counter()
    schema = FeatureSchema.build([("uid", "single"), ("tags", "multi")], ["iid", "cat"], ["slot"])
    data = Dataset.from_samples(schema, make_samples(schema, 4, seed=1))
    sizes = {f.name: 6 for f in schema.fields}
    enc = EncoderModel(schema, sizes, EncoderConfig(d=4, d_k=3, hidden=6, ffn_hidden=6))
    e_enc = ag.grad_check(lambda: enc.loss(data), enc.params)
    z = np.random.default_rng(0).normal(size=(4, schema.n_queries, 3))
    cat = RecModel(schema, sizes, "concat", RecConfig(d=4, hidden=(5, 3)), d_k=3)
    e_cat = ag.grad_check(lambda: cat.loss(data, z), cat.params)
    tow = RecModel(schema, sizes, "tower_mlp", RecConfig(d=4, hidden=(5, 3), tower_hidden=4,
                                                          adaptation="share", adapt_layers=2), d_k=3)
    e_tow = ag.grad_check(lambda: tow.loss(data, z), tow.params)
    secs = time.perf_counter() - t0
    worst = max(e_enc, e_cat, e_tow)
    verdict(1, worst < 1e-4 and secs < 60 and "adp.w_pro" in tow.params,
            f"max rel err encoder {e_enc:.1e}, concat {e_cat:.1e}, tower+adapt {e_tow:.1e}; {secs:.1f}s")


def test_c02_kb_oracle_equality():
    sd = gen_synthetic(SynthConfig(n_samples=100_000), seed=0)
    data = sd.dataset
    t0 = time.perf_counter()
    enc = EncoderModel(data.schema, data.vocab_sizes(), EncoderConfig())
    kb = generate_kb(data, enc)
    oracle = _split_keys(data, data.schema)
    secs = time.perf_counter() - t0
    got = kb.key_set()
    verdict(2, got == oracle and len(kb) == len(oracle) and secs < 120,
            f"{len(kb)} entries vs {len(oracle)} enumerated, {len(got & oracle)} shared; {secs:.1f}s")


@pytest.mark.parametrize("backend", ["python"] + (["compiled"] if kernels.BACKEND == "compiled" else []))
def test_c03_retrieval_oracle(backend):
    schema = FeatureSchema.build([("uid", "single"), ("tags", "multi")], ["iid", ("cats", "multi")], ["slot"])
    samples = make_samples(schema, 1000, seed=21, card=8)
    data = Dataset.from_samples(schema, samples)
    r = np.random.default_rng(3)
    entries = {}
    for s in samples:
        for q in gen_queries(s, schema):
            for f, v in q.expand():
                key = (f[0], v[0], f[1], v[1], f[2], v[2])
                if key not in entries and r.random() < 0.7:
                    entries[key] = r.normal(size=4).astype(np.float32)
    kb = KnowledgeBase.from_dict(entries, 4)
    got = retrieve(data, kb, backend=backend)
    bad = 0
    for b, s in enumerate(samples):
        for t, q in enumerate(gen_queries(s, schema)):
            acc, n, hit = [0.0] * 4, 0, True
            for f, v in q.expand():
                n += 1
                z = entries.get((f[0], v[0], f[1], v[1], f[2], v[2]))
                if z is None:
                    hit = False
                    continue
                for e in range(4):
                    acc[e] += float(z[e])
            want = np.array([a / float(n) for a in acc])
            if got.vectors[b, t].tobytes() != want.tobytes() or got.hits[b, t] != hit:
                bad += 1
    verdict(3, bad == 0, f"{backend} backend: {bad} of {got.hits.size} query vectors differ from the naive oracle")


def test_c04_auc_oracle():
    r = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        n = int(r.integers(2, 300))
        s = r.integers(0, 10, size=n) / 10.0
        y = r.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        worst = max(worst, abs(auc(s, y) - auc_pairwise(s, y)))
    verdict(4, worst < 1e-12, f"max |fast - pairwise| over 200 tied trials = {worst:.1e}")


def test_c05_serialization(tmp_path):
    r = np.random.default_rng(5)
    n = 12_000
    kb = KnowledgeBase(r.integers(0, 4, size=(n, 3)), np.c_[np.arange(n), r.integers(0, 1 << 30, size=(n, 2))],
                       r.normal(size=(n, 8)), 8, b"s" * 32)
    save_kb(kb, tmp_path / "a.bin")
    save_kb(load_kb(tmp_path / "a.bin"), tmp_path / "b.bin")
    same = (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    raw = (tmp_path / "a.bin").read_bytes()
    rejected = 0
    for cut in (len(raw) - 1, len(raw) - 20, 100, 30):
        try:
            kb_from_bytes(raw[:cut])
        except FormatError:
            rejected += 1
    verdict(5, same and rejected == 4 and load_kb(tmp_path / "a.bin").checksum() == kb.checksum(),
            f"{n}-entry rewrite byte-identical={same}; {rejected}/4 truncations rejected")


def test_c06_dimensional_contracts():
    r = np.random.default_rng(6)
    bad = []
    for t in range(50):
        fu, fv, fc = (int(x) for x in r.integers(1, 5, size=3))
        d, d_k, L = int(r.integers(2, 9)), int(r.integers(1, 9)), int(r.integers(1, 4))
        schema = FeatureSchema.build([f"u{i}" for i in range(fu)], [f"v{i}" for i in range(fv)],
                                     [f"c{i}" for i in range(fc)])
        F = schema.n_fields
        x = Dataset.from_samples(schema, make_samples(schema, 1, seed=t))[0]
        nq = len(gen_queries(x, schema))
        unit = AdaptationUnit.init(r, L, d_k, F * d)
        width = inject_concat(np.zeros(F * d), np.zeros((nq, d_k))).shape[0]
        m = RecModel(schema, {f.name: 4 for f in schema.fields}, "concat", RecConfig(d=d, hidden=(3,)), d_k=d_k)
        if (nq != fu * fv * fc or unit.w_pro.shape[0] != L * d_k * (d_k + 1) or width != F * d + nq * d_k
                or m.params["mlp.w0"].shape[0] != width):
            bad.append((fu, fv, fc, d, d_k, L))
    verdict(6, not bad, f"50 random schemas, {len(bad)} violations")


def test_c07_adaptation_zero_case():
    r = np.random.default_rng(7)
    worst = 0.0
    for L in (1, 2, 3):
        unit = AdaptationUnit.init(r, L, 8, 80)
        out = adapt(np.zeros((3, 80)), r.normal(scale=10, size=(3, 36, 8)), unit).data
        worst = max(worst, float(np.abs(out).max()))
    verdict(7, worst == 0.0, f"max |z_hat| with zero sample embedding = {worst}")


def test_c08_update_policies():
    key, fresh = (0, 1, 0, 1, 0, 1), (0, 2, 0, 1, 0, 1)
    base = KnowledgeBase.from_dict({key: [1.0, 1.0, -3.0]}, 3)
    inc = KnowledgeBase.from_dict({key: [0.0, 0.0, 2.0], fresh: [4.0, 5.0, 6.0]}, 3)
    rp, ap = merge_kb(base, inc, "rp"), merge_kb(base, inc, "ap")
    ok = (rp.lookup(key)[0].tolist() == [0.0, 0.0, 2.0] and ap.lookup(key)[0].tolist() == [0.5, 0.5, -0.5]
          and rp.lookup(fresh)[0].tolist() == ap.lookup(fresh)[0].tolist() == [4.0, 5.0, 6.0]
          and rp.lookup(fresh)[1] and ap.lookup(fresh)[1])
    verdict(8, ok, f"RP {rp.lookup(key)[0].tolist()}, AP {ap.lookup(key)[0].tolist()}, inserted {len(rp)}/{len(ap)}")


@pytest.mark.slow
def test_c09_end_to_end_ordering(run_g0):
    share, base, fixed = (run_g0.mean_auc(m) for m in ("d2k_adp_share", "d2k_base", "fixed_r"))
    verdict(9, not run_g0.failed and share - fixed >= 0.02 and share >= base - 0.005 and run_g0.seconds < 1800,
            f"adp_share {share:.4f}, base {base:.4f}, fixed_r {fixed:.4f}; whole G=0 run {run_g0.seconds / 60:.1f} min")


@pytest.mark.slow
def test_c10_direct_knowledge(run_g0):
    glob, adp = run_g0.mean_auc("direct_only"), run_g0.mean_auc("direct_only_adp")
    verdict(10, glob >= 0.53 and adp >= glob, f"direct global {glob:.4f}, direct adapted {adp:.4f}")


@pytest.mark.slow
def test_c11_outdated_knowledge(run_g0, run_g1):
    rises = {m: run_g1.mean_auc(m) - run_g0.mean_auc(m) for m in EXP_METHODS}
    margin = run_g1.mean_auc("d2k_adp_share") - run_g1.mean_auc("fixed_r")
    worst = max(rises, key=rises.get)
    verdict(11, not run_g1.failed and max(rises.values()) <= 0.01 and margin >= 0.01,
            f"largest G=1 minus G=0 change {rises[worst]:+.4f} ({worst}); adp_share - fixed_r at G=1 {margin:.4f}")


@pytest.mark.slow
def test_c12_kb_size_reduction(run_g0):
    n_full, n_small = run_g0.kb_entries("full"), run_g0.kb_entries("small")
    a_full = run_g0.mean_auc("d2k_adp_share", "full")
    a_small = run_g0.mean_auc("d2k_adp_share", "small")
    a_fixed = run_g0.mean_auc("fixed_r")
    verdict(12, n_small < n_full and a_small <= a_full + 0.005 and a_small >= a_fixed - 0.005,
            f"entries {n_small} < {n_full}; adp_share AUC small {a_small:.4f}, full {a_full:.4f}, fixed_r {a_fixed:.4f}")


def test_c13_retrieval_latency():
    schema = FeatureSchema.build([f"u{i}" for i in range(3)], [f"v{i}" for i in range(3)], [f"c{i}" for i in range(4)])
    sizes = {f.name: 5000 for f in schema.fields}
    data = random_dataset(schema, sizes, 21 * 1024, seed=0)
    kb = random_kb(schema, sizes, 1_000_000, d_k=8, cover=data.take(range(0, len(data), 2)))
    res = bench_retrieval(kb, data, batch=1024, n_batches=20)
    verdict(13, len(kb) >= 1_000_000 and schema.n_queries <= 36 and res.median_ms < 100,
            f"{res.backend} backend, {len(kb)} entries, N_q={schema.n_queries}: median {res.median_ms:.1f} ms/batch")


@pytest.mark.slow
def test_c14_determinism(run_g0):
    again = run_experiment(ExperimentConfig(methods=("fixed_r", "d2k_adp_share"), seeds=(3,),
                                            feature_sets={"full": None, "small": FS_SMALL}))
    diffs = 0
    for r in again.records:
        (o,) = [c for c in run_g0.cells(r.method, r.feature_set) if c.seed == r.seed]
        diffs += (o.auc != r.auc) + (o.logloss != r.logloss)
    verdict(14, diffs == 0 and len(again.records) == 3, f"{len(again.records)} rerun cells, {diffs} metric mismatches")
