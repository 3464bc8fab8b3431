# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled k-NN scan with a partial-distance early exit.

Same arithmetic order as ``_knn_py.pairwise_distance`` so both paths agree
to the last few ulps.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, atan2, INFINITY

cnp.import_array()


cdef inline double _slot(const double[:, ::1] f, Py_ssize_t i, const double* q,
                         const double* w, int s) noexcept nogil:
    cdef Py_ssize_t o = 8 * s
    cdef double dx = f[i, o] - q[o]
    cdef double dy = f[i, o + 1] - q[o + 1]
    cdef double dz = f[i, o + 2] - q[o + 2]
    cdef double dpos = (dx * dx + dy * dy) + dz * dz
    cdef double dop = f[i, o + 7] - q[o + 7]
    cdef double a0 = f[i, o + 3], a1 = f[i, o + 4], a2 = f[i, o + 5], a3 = f[i, o + 6]
    cdef double b0 = q[o + 3], b1 = q[o + 4], b2 = q[o + 5], b3 = q[o + 6]
    cdef double dot = ((a0 * b0 + a1 * b1) + a2 * b2) + a3 * b3
    cdef double sg = -1.0 if dot < 0.0 else 1.0
    cdef double e0 = a0 - sg * b0, e1 = a1 - sg * b1, e2 = a2 - sg * b2, e3 = a3 - sg * b3
    cdef double s0 = a0 + sg * b0, s1 = a1 + sg * b1, s2 = a2 + sg * b2, s3 = a3 + sg * b3
    cdef double nd = sqrt(((e0 * e0 + e1 * e1) + e2 * e2) + e3 * e3)
    cdef double ns = sqrt(((s0 * s0 + s1 * s1) + s2 * s2) + s3 * s3)
    cdef double theta = 4.0 * atan2(nd, ns)
    return (w[s] * dpos + w[3 + s] * (theta * theta)) + w[6 + s] * (dop * dop)


cdef inline double _cheap(const double[:, ::1] f, Py_ssize_t i, const double* q,
                          const double* w) noexcept nogil:
    # lower bound: every term except the rotation ones, which are >= 0
    cdef double acc = 0.0, d, t
    cdef Py_ssize_t s, o, c
    for c in range(3):
        d = f[i, 24 + c] - q[24 + c]
        acc += w[9] * d * d
    for s in range(3):
        o = 8 * s
        t = 0.0
        for c in range(3):
            d = f[i, o + c] - q[o + c]
            t += d * d
        d = f[i, o + 7] - q[o + 7]
        acc += w[s] * t + w[6 + s] * d * d
    return acc


cdef inline double _full(const double[:, ::1] f, Py_ssize_t i, const double* q,
                         const double* w) noexcept nogil:
    cdef double t = _slot(f, i, q, w, 0)
    t = t + _slot(f, i, q, w, 1)
    t = t + _slot(f, i, q, w, 2)
    cdef Py_ssize_t o = 24
    cdef double dx = f[i, o] - q[o]
    cdef double dy = f[i, o + 1] - q[o + 1]
    cdef double dz = f[i, o + 2] - q[o + 2]
    return t + w[9] * ((dx * dx + dy * dy) + dz * dz)


cdef inline bint _better(double d, Py_ssize_t i, double wd, Py_ssize_t wi) noexcept nogil:
    return d < wd or (d == wd and i < wi)


cdef inline void _insert(double* bd, Py_ssize_t* bi, int k, double d, Py_ssize_t i) noexcept nogil:
    # bd/bi sorted ascending by (d, id); drop the last entry
    cdef int j = k - 1
    while j > 0 and _better(d, i, bd[j - 1], bi[j - 1]):
        bd[j] = bd[j - 1]
        bi[j] = bi[j - 1]
        j -= 1
    bd[j] = d
    bi[j] = i


cdef void _scan(const double[:, ::1] f, const double* q, const double* w, int k,
                Py_ssize_t exclude, const Py_ssize_t* hints, int nh,
                double* bd, Py_ssize_t* bi) noexcept nogil:
    cdef Py_ssize_t n = f.shape[0], i
    cdef int j, h
    cdef double d, bound
    cdef bint dup
    for j in range(k):
        bd[j] = INFINITY
        bi[j] = n
    # seed with hints so the early exit has a tight bound from the start
    for h in range(nh):
        i = hints[h]
        if i < 0 or i >= n or i == exclude:
            continue
        dup = False
        for j in range(k):
            if bi[j] == i:
                dup = True
                break
        if dup:
            continue
        d = _full(f, i, q, w)
        if _better(d, i, bd[k - 1], bi[k - 1]):
            _insert(bd, bi, k, d, i)
    for i in range(n):
        if i == exclude:
            continue
        bound = bd[k - 1]
        if _cheap(f, i, q, w) > bound * (1.0 + 1e-12) + 1e-300:
            continue
        d = _full(f, i, q, w)
        if _better(d, i, bd[k - 1], bi[k - 1]):
            dup = False
            for j in range(k):
                if bi[j] == i:
                    dup = True
                    break
            if not dup:
                _insert(bd, bi, k, d, i)


def pairwise_distance(const double[:, ::1] features, const double[::1] query, const double[::1] weights):
    cdef Py_ssize_t n = features.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _full(features, i, &query[0], &weights[0])
    return out


def knn_query(const double[:, ::1] features, const double[::1] query, const double[::1] weights,
              int k, Py_ssize_t exclude=-1, hints=None):
    cdef Py_ssize_t n = features.shape[0]
    k = <int>min(k, n - (1 if exclude >= 0 else 0))
    ids = np.empty(k, dtype=np.intp)
    dists = np.empty(k)
    cdef Py_ssize_t[::1] bi = ids
    cdef double[::1] bd = dists
    cdef Py_ssize_t[::1] hv
    cdef int nh = 0
    cdef Py_ssize_t* hp = NULL
    if hints is not None and len(hints):
        hv = np.ascontiguousarray(hints, dtype=np.intp)
        nh = hv.shape[0]
        hp = &hv[0]
    with nogil:
        _scan(features, &query[0], &weights[0], k, exclude, hp, nh, &bd[0], &bi[0])
    return ids.astype(np.int64), dists


cdef inline void _visit(const double[:, ::1] f, Py_ssize_t j, const Py_ssize_t[::1] ids,
                        const double* q, const double* w, int k, Py_ssize_t exclude,
                        double* bd, Py_ssize_t* bi) noexcept nogil:
    cdef Py_ssize_t i = ids[j]
    cdef double d
    cdef int m
    if i == exclude:
        return
    if _cheap(f, j, q, w) > bd[k - 1] * (1.0 + 1e-12) + 1e-300:
        return
    d = _full(f, j, q, w)
    if _better(d, i, bd[k - 1], bi[k - 1]):
        for m in range(k):
            if bi[m] == i:
                return
        _insert(bd, bi, k, d, i)


cdef void _sweep(const double[:, ::1] f, const Py_ssize_t[::1] ids, const double[::1] keys,
                 const double* q, double qkey, const double* w, int k, Py_ssize_t exclude,
                 Py_ssize_t start, double slack, double* bd, Py_ssize_t* bi) noexcept nogil:
    # rows are sorted by a key whose squared gap never exceeds the distance,
    # so each side of the sweep stops once the gap alone beats the k-th best
    cdef Py_ssize_t n = f.shape[0]
    cdef Py_ssize_t lo = start - 1, hi = start
    cdef double glo, ghi, lim
    while lo >= 0 or hi < n:
        lim = bd[k - 1] * (1.0 + 1e-12) + 1e-300
        # slack covers rounding in the keys themselves
        glo = qkey - keys[lo] - slack if lo >= 0 else INFINITY
        ghi = keys[hi] - qkey - slack if hi < n else INFINITY
        if glo <= ghi:
            if glo > 0 and glo * glo > lim:
                break
            _visit(f, lo, ids, q, w, k, exclude, bd, bi)
            lo -= 1
        else:
            if ghi > 0 and ghi * ghi > lim:
                break
            _visit(f, hi, ids, q, w, k, exclude, bd, bi)
            hi += 1


cdef Py_ssize_t _lower_bound(const double[::1] keys, double x) noexcept nogil:
    cdef Py_ssize_t a = 0, b = keys.shape[0], m
    while a < b:
        m = (a + b) >> 1
        if keys[m] < x:
            a = m + 1
        else:
            b = m
    return a


def sweep_query(const double[:, ::1] fs, const Py_ssize_t[::1] ids, const double[::1] keys,
                const double[::1] axis, const double[::1] query, const double[::1] weights, int k,
                double slack, Py_ssize_t exclude=-1, seed_rows=None):
    """k-NN over rows pre-sorted by ``keys = embed(row) @ axis``.

    ``fs`` holds the sorted rows, ``ids`` their original ids (used for
    ordering ties), ``seed_rows`` optional positions in ``fs`` evaluated first.
    """
    cdef Py_ssize_t n = fs.shape[0], j, c
    k = <int>min(k, n - (1 if exclude >= 0 else 0))
    out_i = np.empty(k, dtype=np.intp)
    out_d = np.empty(k)
    cdef Py_ssize_t[::1] bi = out_i
    cdef double[::1] bd = out_d
    cdef double qkey = _key(&query[0], &weights[0], &axis[0])
    cdef Py_ssize_t[::1] sv
    cdef Py_ssize_t ns = 0
    if seed_rows is not None and len(seed_rows):
        sv = np.ascontiguousarray(seed_rows, dtype=np.intp)
        ns = sv.shape[0]
    with nogil:
        for c in range(k):
            bd[c] = INFINITY
            bi[c] = -2
        for c in range(ns):
            j = sv[c]
            if 0 <= j < n:
                _visit(fs, j, ids, &query[0], &weights[0], k, exclude, &bd[0], &bi[0])
        _sweep(fs, ids, keys, &query[0], qkey, &weights[0], k, exclude,
               _lower_bound(keys, qkey), slack, &bd[0], &bi[0])
    return out_i.astype(np.int64), out_d


def sweep_loo(const double[:, ::1] fs, const Py_ssize_t[::1] ids, const double[::1] keys,
              const double[::1] axis, const double[::1] weights, int k, double slack, rows):
    """Leave-one-out k-NN for sorted positions ``rows``; excluded id is the row's own."""
    cdef Py_ssize_t[::1] rv = np.ascontiguousarray(rows, dtype=np.intp)
    cdef Py_ssize_t m = rv.shape[0], n = fs.shape[0], j, r, c, h
    k = <int>min(k, n - 1)
    out_i = np.empty((m, k), dtype=np.intp)
    out_d = np.empty((m, k))
    cdef Py_ssize_t[:, ::1] bi = out_i
    cdef double[:, ::1] bd = out_d
    with nogil:
        for j in range(m):
            r = rv[j]
            for c in range(k):
                bd[j, c] = INFINITY
                bi[j, c] = -2
            # adjacent rows in key order are cheap, usually tight, seeds
            for h in range(r - k, r + k + 1):
                if 0 <= h < n and h != r:
                    _visit(fs, h, ids, &fs[r, 0], &weights[0], k, ids[r], &bd[j, 0], &bi[j, 0])
            _sweep(fs, ids, keys, &fs[r, 0], keys[r], &weights[0], k, ids[r], r, slack,
                   &bd[j, 0], &bi[j, 0])
    return out_i.astype(np.int64), out_d


cdef double _key(const double* x, const double* w, const double* axis) noexcept nogil:
    # projection of the weighted Euclidean embedding of a feature
    cdef double acc = 0.0
    cdef int s, c
    for s in range(3):
        for c in range(3):
            acc += axis[3 * s + c] * sqrt(w[s]) * x[8 * s + c]
        acc += axis[9 + s] * sqrt(w[6 + s]) * x[8 * s + 7]
    for c in range(3):
        acc += axis[12 + c] * sqrt(w[9]) * x[24 + c]
    return acc


def embed_keys(const double[:, ::1] f, const double[::1] weights, const double[::1] axis):
    cdef Py_ssize_t n = f.shape[0], i
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = _key(&f[i, 0], &weights[0], &axis[0])
    return out
