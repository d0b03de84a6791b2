import numpy as np
import pytest

from ternkb import _kernels_py, kernels
from ternkb.errors import ConfigError

compiled = pytest.mark.skipif(kernels.get_backend().BACKEND != "compiled", reason="compiled kernels not built")


def test_backend_selection():
    assert kernels.get_backend("python") is _kernels_py
    assert kernels.get_backend(None).BACKEND in ("compiled", "python")
    with pytest.raises(ConfigError):
        kernels.get_backend("gpu")


def _random_case(seed, n_keys=500, B=40, T=6, C=4, L=3):
    r = np.random.default_rng(seed)
    fields = r.integers(0, 3, size=(n_keys, 3)).astype(np.uint16)
    values = r.integers(0, 8, size=(n_keys, 3)).astype(np.uint32)
    _, keep = np.unique(np.hstack([fields, values]), axis=0, return_index=True)
    fields, values = fields[keep], values[keep]
    vectors = r.normal(size=(len(fields), 5)).astype(np.float32)
    tf = r.integers(0, 3, size=(T, 3))
    tc = r.integers(0, C, size=(T, 3))
    vals = r.integers(0, 8, size=(B, C, L))
    lens = r.integers(0, L + 1, size=(B, C))
    return fields, values, vectors, tf, tc, vals, lens


@compiled
@pytest.mark.parametrize("seed", range(5))
def test_compiled_matches_python(seed):
    fields, values, vectors, tf, tc, vals, lens = _random_case(seed)
    c, p = kernels.get_backend("compiled"), _kernels_py
    ic, ip = c.build_index(fields, values), p.build_index(fields, values)
    q_f = np.vstack([fields, np.zeros((5, 3), np.uint16)])
    q_v = np.vstack([values, np.full((5, 3), 99, np.uint32)])
    rc = c.lookup_rows(ic, fields, values, q_f, q_v)
    rp = p.lookup_rows(ip, fields, values, q_f, q_v)
    np.testing.assert_array_equal(rc, rp)
    np.testing.assert_array_equal(rp[:len(fields)], np.arange(len(fields)))
    assert np.all(rp[len(fields):] == -1)
    oc, hc = c.retrieve_batch(ic, fields, values, vectors, tf, tc, vals, lens)
    op, hp = p.retrieve_batch(ip, fields, values, vectors, tf, tc, vals, lens)
    assert oc.tobytes() == op.tobytes()
    np.testing.assert_array_equal(hc, hp)


@pytest.mark.parametrize("name", ["python"] + (["compiled"] if kernels.get_backend().BACKEND == "compiled" else []))
def test_empty_index(name):
    be = kernels.get_backend(name)
    f = np.zeros((0, 3), np.uint16)
    v = np.zeros((0, 3), np.uint32)
    idx = be.build_index(f, v)
    assert be.lookup_rows(idx, f, v, [[0, 0, 0]], [[1, 2, 3]]).tolist() == [-1]
    out, hits = be.retrieve_batch(idx, f, v, np.zeros((0, 2), np.float32), np.zeros((1, 3), np.int64),
                                  np.zeros((1, 3), np.int64), np.ones((2, 1, 1), np.int64),
                                  np.ones((2, 1), np.int64))
    assert out.shape == (2, 1, 2) and not hits.any() and np.all(out == 0)
