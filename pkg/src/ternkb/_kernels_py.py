"""Pure-Python twin of the compiled knowledge-base kernels.

Same signatures and bit-identical results; the index is a dict from the
six-integer key to its row.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"


def build_index(fields, values) -> dict:
    kf = np.asarray(fields, dtype=np.int64).reshape(-1, 3).tolist()
    kv = np.asarray(values, dtype=np.int64).reshape(-1, 3).tolist()
    return {(f[0], f[1], f[2], v[0], v[1], v[2]): i for i, (f, v) in enumerate(zip(kf, kv))}


def lookup_rows(index, fields, values, qfields, qvalues) -> np.ndarray:
    qf = np.asarray(qfields, dtype=np.int64).reshape(-1, 3).tolist()
    qv = np.asarray(qvalues, dtype=np.int64).reshape(-1, 3).tolist()
    get = index.get
    return np.array([get((f[0], f[1], f[2], v[0], v[1], v[2]), -1) for f, v in zip(qf, qv)],
                    dtype=np.int64)


def retrieve_batch(index, fields, values, vectors, term_fields, term_cols, vals, lens):
    vec = np.asarray(vectors, dtype=np.float32)
    tf = np.asarray(term_fields, dtype=np.int64).tolist()
    tc = np.asarray(term_cols, dtype=np.int64).tolist()
    V = np.asarray(vals, dtype=np.int64)
    N = np.asarray(lens, dtype=np.int64)
    B, T, dk = V.shape[0], len(tf), vec.shape[1]
    out = np.zeros((B, T, dk), dtype=np.float64)
    hits = np.zeros((B, T), dtype=bool)
    get = index.get
    rows_cache = V.tolist()
    lens_cache = N.tolist()
    for b in range(B):
        vb, nb = rows_cache[b], lens_cache[b]
        for t in range(T):
            cu, cv, cc = tc[t]
            fu, fv, fc = tf[t]
            us, vs, cs = vb[cu][:nb[cu]], vb[cv][:nb[cv]], vb[cc][:nb[cc]]
            acc = np.zeros(dk, dtype=np.float64)
            all_hit = True
            for vu in us:
                for vv in vs:
                    for vc in cs:
                        row = get((fu, fv, fc, vu, vv, vc), -1)
                        if row < 0:
                            all_hit = False
                        else:
                            acc += vec[row].astype(np.float64)
            count = len(us) * len(vs) * len(cs)
            if count:
                out[b, t] = acc / float(count)
            else:
                all_hit = False
            hits[b, t] = all_hit
    return out, hits
