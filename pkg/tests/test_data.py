import numpy as np
import pytest
from hypothesis import given, strategies as st

from ternkb.data import (Dataset, FeatureSchema, Sample, Vocabulary, load_logs, load_vocab, partition,
                         save_vocab, split_windows, write_logs)
from ternkb.errors import ConfigError, DataError
from ternkb.synth import SynthConfig, gen_synthetic

from conftest import make_samples

# ---------------------------------------------------------------------------
# schema


def test_schema_counts_and_queries():
    s = FeatureSchema.build(["a", ("b", "multi")], ["c", "d"], ["e"])
    assert s.n_fields == 5
    assert s.n_queries == 4
    assert s.field("b").multi
    assert s.with_kb_subset(["a", "c", "d", "e"]).n_queries == 2


@pytest.mark.parametrize("user,item,ctx,kb", [
    ([], ["c"], ["e"], None),
    (["a"], ["a"], ["e"], None),
    (["a"], ["c"], ["e"], ["a", "c"]),
    (["a"], ["c"], ["e"], ["a", "c", "e", "zz"]),
])
def test_schema_validation(user, item, ctx, kb):
    with pytest.raises(ConfigError):
        FeatureSchema.build(user, item, ctx, kb)


def test_schema_text_round_trip(tmp_path):
    s = FeatureSchema.build(["uid", ("tags", "multi")], ["iid"], ["slot"], ["uid", "iid", "slot"], max_multi=5)
    assert FeatureSchema.from_text(s.to_text()) == s
    p = tmp_path / "schema.txt"
    p.write_text("# comment\nuser = uid, tags:multi\nitem = iid  # trailing\ncontext = slot\n"
                 "kb_subset = uid, iid, slot\nmax_multi = 5\n")
    assert FeatureSchema.load(p) == s
    assert FeatureSchema.load(p).hash() == s.hash()
    with pytest.raises(ConfigError):
        FeatureSchema.from_text("user = a\nitem = b\ncontext = c\ncolour = red\n")


# ---------------------------------------------------------------------------
# vocabulary and logs


def _write(path, rows):
    path.write_text("\n".join("\t".join(r) for r in rows) + "\n", encoding="utf-8")


def test_load_logs_shared_ids_and_multi_duplicates(tmp_path, small_schema):
    p = tmp_path / "logs.tsv"
    _write(p, [["timestamp", "label", "uid", "tags", "iid", "slot"],
               ["10", "1", "alice", "a|b|a", "x", "am"],
               ["20", "0", "alice", "b", "y", "pm"]])
    data, vocab = load_logs(p, small_schema)
    assert len(data) == 2
    assert data[0].user_values[0] == data[1].user_values[0] == vocab.encode("uid", "alice")
    tags = data[0].user_values[1]
    assert len(tags) == 3 and tags[0] == tags[2] != tags[1]
    assert list(data.labels) == [1, 0] and list(data.timestamps) == [10, 20]


def test_load_logs_oov_at_scoring_time(tmp_path, small_schema):
    train = tmp_path / "train.tsv"
    _write(train, [["timestamp", "label", "uid", "tags", "iid", "slot"], ["1", "1", "u1", "t", "i1", "s"]])
    _, vocab = load_logs(train, small_schema)
    score = tmp_path / "score.tsv"
    _write(score, [["timestamp", "label", "uid", "tags", "iid", "slot"], ["2", "0", "u2", "t|new", "i1", "s"]])
    data, same = load_logs(score, small_schema, vocab)
    assert same is vocab
    s = data[0]
    assert s.user_values[0] == 0
    assert s.user_values[1] == (vocab.encode("tags", "t"), 0)
    assert s.item_values[0] == vocab.encode("iid", "i1")
    assert vocab.size("uid") == 2  # scoring never grows the vocabulary


@pytest.mark.parametrize("row,msg", [
    (["1", "2", "u", "t", "i", "s"], "label"),
    (["x", "1", "u", "t", "i", "s"], "timestamp"),
    (["1", "1", "u", "t", "i"], "columns"),
])
def test_load_logs_errors_name_line(tmp_path, small_schema, row, msg):
    p = tmp_path / "bad.tsv"
    _write(p, [["timestamp", "label", "uid", "tags", "iid", "slot"], ["0", "1", "u", "t", "i", "s"], row])
    with pytest.raises(DataError, match=rf":3: .*{msg}"):
        load_logs(p, small_schema)


def test_load_logs_bad_header(tmp_path, small_schema):
    p = tmp_path / "bad.tsv"
    _write(p, [["ts", "label", "uid", "tags", "iid", "slot"]])
    with pytest.raises(DataError, match=":1:"):
        load_logs(p, small_schema)


def test_logs_and_vocab_round_trip(tmp_path, small_schema, small_data):
    write_logs(tmp_path / "a.tsv", small_data)
    data, vocab = load_logs(tmp_path / "a.tsv", small_schema)
    save_vocab(tmp_path / "v.tsv", vocab)
    assert load_vocab(tmp_path / "v.tsv") == vocab
    write_logs(tmp_path / "b.tsv", data, vocab)
    assert (tmp_path / "a.tsv").read_text() == (tmp_path / "b.tsv").read_text()


@given(st.lists(st.text(alphabet="abcdefgh", min_size=1, max_size=4), min_size=1, max_size=30))
def test_vocab_ids_dense_injective_and_round_trip(tokens):
    v = Vocabulary()
    ids = [v.add("f", t) for t in tokens]
    assert 0 not in ids
    assert sorted(set(ids)) == list(range(1, len(set(tokens)) + 1))
    for t, i in zip(tokens, ids):
        assert v.encode("f", v.decode("f", i)) == i
        assert v.encode("f", t) == i


# ---------------------------------------------------------------------------
# dataset


def test_dataset_round_trips_samples(small_schema):
    samples = make_samples(small_schema, 25, seed=9)
    data = Dataset.from_samples(small_schema, samples)
    assert list(data) == samples
    sub = data.take([3, 0])
    assert sub[0] == samples[3] and sub[1] == samples[0]
    both = Dataset.concat([data.take(range(10)), data.take(range(10, 25))])
    assert list(both) == samples


def test_multi_values_truncated_to_most_recent():
    s = FeatureSchema.build([("h", "multi")], ["i"], ["c"], max_multi=3)
    data = Dataset.from_samples(s, [Sample(((1, 2, 3, 4, 5),), (1,), (1,), 1)])
    assert data[0].user_values[0] == (3, 4, 5)


# ---------------------------------------------------------------------------
# partition


def _timed(schema, stamps):
    return Dataset.from_samples(schema, [Sample((1,), (1,), (1,), 0, t) for t in stamps])


def test_partition_basic():
    s = FeatureSchema.build(["u"], ["i"], ["c"])
    data = _timed(s, [0, 5, 10, 15, 20, 25])
    part = partition(data, 10, p1=1, p2=2, gap=0)
    assert list(part.old.timestamps) == [0, 5]
    assert list(part.train.timestamps) == [10, 15]
    assert list(part.test.timestamps) == [20, 25]
    assert part.dropped is None


def test_partition_gap_drops_window():
    s = FeatureSchema.build(["u"], ["i"], ["c"])
    data = _timed(s, [0, 10, 20, 30])
    part = partition(data, 10, p1=1, p2=3, gap=1)
    assert list(part.old.timestamps) == [0]
    assert list(part.dropped.timestamps) == [10]
    assert list(part.train.timestamps) == [20]
    assert list(part.test.timestamps) == [30]


def test_window_boundary_goes_to_later_window():
    s = FeatureSchema.build(["u"], ["i"], ["c"])
    blocks = split_windows(_timed(s, [0, 9, 10, 19, 20]), 10)
    assert [list(b.timestamps) for b in blocks] == [[0, 9], [10, 19], [20]]


@pytest.mark.parametrize("p1,p2,gap", [(2, 2, 0), (3, 2, 0), (1, 4, 0), (1, 2, 1), (-1, 2, 0)])
def test_partition_errors(p1, p2, gap):
    s = FeatureSchema.build(["u"], ["i"], ["c"])
    with pytest.raises(ConfigError):
        partition(_timed(s, [0, 10, 20, 30]), 10, p1, p2, gap)


@given(st.lists(st.integers(0, 999), min_size=4, max_size=60), st.integers(0, 2), st.integers(0, 1))
def test_partition_is_exact_cover(stamps, p1, gap):
    s = FeatureSchema.build(["u"], ["i"], ["c"])
    data = _timed(s, stamps)
    T = len(split_windows(data, 100))
    p2 = p1 + gap + 1
    if p2 >= T:
        return
    try:
        part = partition(data, 100, p1, p2, gap)
    except ConfigError:
        return  # an empty train or test split is a configuration error
    pieces = [d for d in (part.old, part.dropped, part.train, part.test) if d is not None]
    got = np.sort(np.concatenate([d.timestamps for d in pieces]))
    np.testing.assert_array_equal(got, np.sort(stamps))
    for a, b in zip(pieces, pieces[1:]):
        assert a.timestamps.max() < b.timestamps.min()


# ---------------------------------------------------------------------------
# synthetic generator


def test_synthetic_deterministic():
    cfg = SynthConfig(n_users=20, n_items=20, n_ctx=3, n_samples=500, n_windows=3)
    a, b = gen_synthetic(cfg, seed=4), gen_synthetic(cfg, seed=4)
    for f in a.dataset.schema.fields:
        assert a.dataset.columns[f.name].tobytes() == b.dataset.columns[f.name].tobytes()
    assert a.dataset.labels.tobytes() == b.dataset.labels.tobytes()
    assert a.dataset.timestamps.tobytes() == b.dataset.timestamps.tobytes()
    c = gen_synthetic(cfg, seed=5)
    assert a.dataset.labels.tobytes() != c.dataset.labels.tobytes()


def test_synthetic_attributes_fixed_per_entity(tiny_synth):
    d = tiny_synth.dataset
    for name in ("user_segment", "item_category"):
        owner = d.columns["user_id" if name.startswith("user") else "item_id"]
        for e in np.unique(owner)[:10]:
            assert len(np.unique(d.columns[name][owner == e])) == 1


def test_synthetic_rates_follow_theta():
    """Monte-Carlo: empirical click rate per feature combination ~ sigmoid of its theta sum."""
    from ternkb.synth import SynthField
    fields = (SynthField("u", "user", 3), SynthField("v", "item", 3), SynthField("c", "context", 2))
    cfg = SynthConfig(n_users=3, n_items=3, n_ctx=2, fields=fields, n_samples=60_000, n_windows=1, sigma=1.0,
                      bias=0.0)
    sd = gen_synthetic(cfg, seed=11)
    d = sd.dataset
    theta = sd.theta[0][(0, 0, 0)]
    keys = d.columns["u"] * 100 + d.columns["v"] * 10 + d.columns["c"]
    for key in np.unique(keys):
        u, v, c = key // 100, (key // 10) % 10, key % 10
        rows = keys == key
        want = 1 / (1 + np.exp(-theta[u, v, c]))
        se = np.sqrt(want * (1 - want) / rows.sum())
        assert abs(d.labels[rows].mean() - want) < 5 * se
    # shuffling the sample order leaves per-combination rates unchanged
    perm = np.random.default_rng(0).permutation(len(d))
    sh = d.take(perm)
    sk = keys[perm]
    for key in np.unique(keys)[:5]:
        assert sh.labels[sk == key].mean() == d.labels[keys == key].mean()


def test_synthetic_true_logits_match_generator(tiny_synth):
    logits = tiny_synth.true_logits()
    assert logits.shape == (len(tiny_synth.dataset),)
    p = 1 / (1 + np.exp(-logits))
    assert abs(p.mean() - tiny_synth.dataset.labels.mean()) < 0.03


def test_synthetic_sigma_zero_has_no_signal():
    cfg = SynthConfig(n_users=20, n_items=20, n_ctx=3, n_samples=2000, sigma=0.0, bias=-0.5)
    sd = gen_synthetic(cfg, seed=1)
    np.testing.assert_allclose(sd.true_logits(), -0.5)


def test_synthetic_drift_rotates_theta():
    cfg = SynthConfig(n_users=10, n_items=10, n_ctx=2, n_samples=100, n_windows=3, drift_rate=0.5)
    sd = gen_synthetic(cfg, seed=2)
    a, b = sd.theta[0][(0, 0, 0)], sd.theta[1][(0, 0, 0)]
    changed = np.mean(a != b)
    assert 0.35 < changed < 0.65
    still = gen_synthetic(SynthConfig(n_users=10, n_items=10, n_ctx=2, n_samples=100, n_windows=3), seed=2)
    np.testing.assert_array_equal(still.theta[0][(0, 0, 0)], still.theta[2][(0, 0, 0)])


@pytest.mark.parametrize("kw", [{"n_samples": 0}, {"drift_rate": 1.5}, {"sigma": -1.0}])
def test_synthetic_invalid_config(kw):
    with pytest.raises(ConfigError):
        gen_synthetic(SynthConfig(**kw))
