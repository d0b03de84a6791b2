# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled knowledge-base index and batch retrieval.

The index is an open-addressing table (linear probing, power-of-two
capacity, load <= 0.5) holding row numbers into the key arrays; -1 marks an
empty slot.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint16_t, uint32_t, uint64_t

cnp.import_array()

BACKEND = "compiled"


cdef int64_t _MAXV = 4294967295


cdef inline bint _valid(int64_t a, int64_t b, int64_t c) nogil:
    return 0 <= a <= _MAXV and 0 <= b <= _MAXV and 0 <= c <= _MAXV


cdef inline uint64_t _mix(uint64_t x) nogil:
    x ^= x >> 30
    x *= <uint64_t>0xbf58476d1ce4e5b9ULL
    x ^= x >> 27
    x *= <uint64_t>0x94d049bb133111ebULL
    x ^= x >> 31
    return x


cdef inline uint64_t _hash(uint64_t fu, uint64_t fv, uint64_t fc,
                           uint64_t vu, uint64_t vv, uint64_t vc) nogil:
    cdef uint64_t h = _mix((fu << 32) | (fv << 16) | fc)
    h = _mix(h ^ vu)
    h = _mix(h ^ (vv + <uint64_t>0x9e3779b97f4a7c15ULL))
    return _mix(h ^ (vc * <uint64_t>0x632be59bd9b4e019ULL))


cdef inline int64_t _find(const int64_t[::1] table, uint64_t mask,
                          const uint16_t[:, ::1] kf, const uint32_t[:, ::1] kv,
                          uint64_t fu, uint64_t fv, uint64_t fc,
                          uint64_t vu, uint64_t vv, uint64_t vc) nogil:
    cdef uint64_t slot = _hash(fu, fv, fc, vu, vv, vc) & mask
    cdef int64_t row
    while True:
        row = table[slot]
        if row < 0:
            return -1
        if (kv[row, 0] == vu and kv[row, 1] == vv and kv[row, 2] == vc
                and kf[row, 0] == fu and kf[row, 1] == fv and kf[row, 2] == fc):
            return row
        slot = (slot + 1) & mask


def build_index(fields, values):
    """Index over ``fields`` (N, 3) uint16 and ``values`` (N, 3) uint32; keys must be unique."""
    cdef const uint16_t[:, ::1] kf = np.ascontiguousarray(fields, dtype=np.uint16).reshape(-1, 3)
    cdef const uint32_t[:, ::1] kv = np.ascontiguousarray(values, dtype=np.uint32).reshape(-1, 3)
    cdef Py_ssize_t n = kf.shape[0], i
    cdef uint64_t cap = 16
    while cap < <uint64_t>(2 * n):
        cap <<= 1
    arr = np.full(cap, -1, dtype=np.int64)
    cdef int64_t[::1] table = arr
    cdef uint64_t mask = cap - 1, slot
    with nogil:
        for i in range(n):
            slot = _hash(kf[i, 0], kf[i, 1], kf[i, 2], kv[i, 0], kv[i, 1], kv[i, 2]) & mask
            while table[slot] >= 0:
                slot = (slot + 1) & mask
            table[slot] = i
    return arr


def lookup_rows(index, fields, values, qfields, qvalues):
    """Row of each query key, -1 when absent."""
    cdef const int64_t[::1] table = index
    cdef const uint16_t[:, ::1] kf = fields
    cdef const uint32_t[:, ::1] kv = values
    cdef const int64_t[:, ::1] qf = np.ascontiguousarray(qfields, dtype=np.int64).reshape(-1, 3)
    cdef const int64_t[:, ::1] qv = np.ascontiguousarray(qvalues, dtype=np.int64).reshape(-1, 3)
    cdef Py_ssize_t m = qf.shape[0], i
    out = np.empty(m, dtype=np.int64)
    cdef int64_t[::1] res = out
    cdef uint64_t mask = table.shape[0] - 1
    with nogil:
        for i in range(m):
            if not _valid(qv[i, 0], qv[i, 1], qv[i, 2]):
                res[i] = -1
            else:
                res[i] = _find(table, mask, kf, kv, qf[i, 0], qf[i, 1], qf[i, 2],
                               qv[i, 0], qv[i, 1], qv[i, 2])
    return out


def retrieve_batch(index, fields, values, vectors, term_fields, term_cols, vals, lens):
    """Knowledge for every (sample, query term).

    ``vals`` (B, C, L) / ``lens`` (B, C) hold the sample's values for the C
    knowledge-base fields; query term t reads columns ``term_cols[t]`` and
    forms keys with within-side field indices ``term_fields[t]``.  A term
    whose columns hold several values is the mean over the cartesian
    expansion; misses add zero and clear the term's hit flag.
    """
    cdef const int64_t[::1] table = index
    cdef const uint16_t[:, ::1] kf = fields
    cdef const uint32_t[:, ::1] kv = values
    cdef const float[:, ::1] vec = vectors
    cdef const int64_t[:, ::1] tf = np.ascontiguousarray(term_fields, dtype=np.int64)
    cdef const int64_t[:, ::1] tc = np.ascontiguousarray(term_cols, dtype=np.int64)
    cdef const int64_t[:, :, ::1] V = np.ascontiguousarray(vals, dtype=np.int64)
    cdef const int64_t[:, ::1] N = np.ascontiguousarray(lens, dtype=np.int64)
    cdef Py_ssize_t B = V.shape[0], T = tf.shape[0], dk = vec.shape[1]
    out_arr = np.zeros((B, T, dk), dtype=np.float64)
    hit_arr = np.zeros((B, T), dtype=np.uint8)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.uint8_t[:, ::1] hits = hit_arr
    cdef uint64_t mask = table.shape[0] - 1
    cdef Py_ssize_t b, t, p, q, r, c, nu, nv, nc
    cdef int64_t row, vu, vv, vc
    cdef int all_hit
    cdef double count
    with nogil:
        for b in range(B):
            for t in range(T):
                nu = N[b, tc[t, 0]]
                nv = N[b, tc[t, 1]]
                nc = N[b, tc[t, 2]]
                all_hit = 1
                for p in range(nu):
                    vu = V[b, tc[t, 0], p]
                    for q in range(nv):
                        vv = V[b, tc[t, 1], q]
                        for r in range(nc):
                            vc = V[b, tc[t, 2], r]
                            if not _valid(vu, vv, vc):
                                row = -1
                            else:
                                row = _find(table, mask, kf, kv, tf[t, 0], tf[t, 1], tf[t, 2], vu, vv, vc)
                            if row < 0:
                                all_hit = 0
                            else:
                                for c in range(dk):
                                    out[b, t, c] += <double>vec[row, c]
                count = <double>(nu * nv * nc)
                if count > 0:
                    for c in range(dk):
                        out[b, t, c] = out[b, t, c] / count
                else:
                    all_hit = 0
                hits[b, t] = all_hit
    return out_arr, hit_arr.astype(bool)
