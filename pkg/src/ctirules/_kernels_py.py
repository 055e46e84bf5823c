"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same functions with the same floating-point
operation order, so results are bit-identical across backends.
"""

from __future__ import annotations

from array import array
from math import sqrt


def wildcard_match(pattern: str, text: str) -> bool:
    np_, nt = len(pattern), len(text)
    p = t = 0
    star = -1
    mark = 0
    while t < nt:
        if p < np_:
            pc = pattern[p]
            if pc == "*":
                star = p
                mark = t
                p += 1
                continue
            if pc == "?" or pc == text[t]:
                p += 1
                t += 1
                continue
        if star >= 0:
            p = star + 1
            mark += 1
            t = mark
            continue
        return False
    while p < np_ and pattern[p] == "*":
        p += 1
    return p == np_


def vector_norm(v) -> float:
    s = 0.0
    for x in v:
        s += x * x
    return sqrt(s)


def row_norms(flat, dims: int) -> array:
    n = len(flat) // dims
    out = array("d", bytes(8 * n))
    for r in range(n):
        base = r * dims
        s = 0.0
        for i in range(base, base + dims):
            s += flat[i] * flat[i]
        out[r] = sqrt(s)
    return out


def cosine_scan(flat, dims: int, norms, query, qnorm: float) -> array:
    n = len(norms)
    out = array("d", bytes(8 * n))
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
        out[r] = c
    return out
