# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Must stay bit-compatible with _kernels_py."""

from cpython.array cimport array, clone
from libc.math cimport sqrt


def wildcard_match(str pattern, str text):
    """Glob match with ``*`` (any run) and ``?`` (one char); inputs pre-folded."""
    cdef Py_ssize_t np = len(pattern), nt = len(text)
    cdef Py_ssize_t p = 0, t = 0, star = -1, mark = 0
    cdef Py_UCS4 pc
    while t < nt:
        if p < np:
            pc = pattern[p]
            if pc == u'*':
                star = p
                mark = t
                p += 1
                continue
            if pc == u'?' or pc == text[t]:
                p += 1
                t += 1
                continue
        if star >= 0:
            p = star + 1
            mark += 1
            t = mark
            continue
        return False
    while p < np and pattern[p] == u'*':
        p += 1
    return p == np


def vector_norm(const double[::1] v):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(v.shape[0]):
        s += v[i] * v[i]
    return sqrt(s)


def row_norms(const double[::1] flat, Py_ssize_t dims):
    cdef Py_ssize_t n = flat.shape[0] // dims
    cdef array out = clone(array('d'), n, False)
    cdef double[::1] o = out
    cdef Py_ssize_t r, i, base
    cdef double s
    for r in range(n):
        base = r * dims
        s = 0.0
        for i in range(dims):
            s += flat[base + i] * flat[base + i]
        o[r] = sqrt(s)
    return out


def cosine_scan(const double[::1] flat, Py_ssize_t dims, const double[::1] norms,
                const double[::1] query, double qnorm):
    """Cosine of ``query`` against every row of the row-major matrix ``flat``."""
    cdef Py_ssize_t n = norms.shape[0]
    cdef array out = clone(array('d'), n, False)
    cdef double[::1] o = out
    cdef Py_ssize_t r, i, base
    cdef double dot, c
    for r in range(n):
        base = r * dims
        dot = 0.0
        for i in range(dims):
            dot += flat[base + i] * query[i]
        c = dot / (norms[r] * qnorm)
        if c > 1.0:
            c = 1.0
        elif c < -1.0:
            c = -1.0
        o[r] = c
    return out
