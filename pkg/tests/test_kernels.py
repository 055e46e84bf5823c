from __future__ import annotations

import math
import random
from array import array

from hypothesis import given, settings
from hypothesis import strategies as st

from ctirules import kernels
from oracles import dp_wildcard

ALPHABET = "ab*?\\."


def test_dispatcher_exposes_a_backend():
    assert kernels.BACKEND in ("cython", "python")


def test_wildcard_basics(kernel_impl):
    m = kernel_impl.wildcard_match
    assert m("*", "")
    assert m("*vssadmin.exe", "c:\\windows\\vssadmin.exe")
    assert not m("*vssadmin.exe", "vssadmin.exe.bak")
    assert m("a?c", "abc")
    assert not m("a?c", "ac")
    assert m("**a**", "xxa")
    assert not m("", "x")


@settings(max_examples=400, deadline=None)
@given(st.text(alphabet=ALPHABET, max_size=8), st.text(alphabet="ab*?\\.", max_size=10))
def test_wildcard_matches_dp_oracle(pattern, text):
    from ctirules import _kernels_py

    assert _kernels_py.wildcard_match(pattern, text) == dp_wildcard(pattern, text)
    assert kernels.wildcard_match(pattern, text) == dp_wildcard(pattern, text)


def test_wildcard_unicode(kernel_impl):
    assert kernel_impl.wildcard_match("*é?", "caféx")
    assert not kernel_impl.wildcard_match("é", "e")


def test_norms_and_scan_match_math(kernel_impl):
    rng = random.Random(3)
    dims = 7
    rows = [[rng.uniform(-2, 2) for _ in range(dims)] for _ in range(20)]
    flat = array("d", [x for r in rows for x in r])
    norms = kernel_impl.row_norms(flat, dims)
    for r, n in zip(rows, norms):
        assert math.isclose(n, math.sqrt(sum(x * x for x in r)), rel_tol=1e-12)
    q = array("d", [rng.uniform(-2, 2) for _ in range(dims)])
    qn = kernel_impl.vector_norm(q)
    scores = kernel_impl.cosine_scan(flat, dims, norms, q, qn)
    for r, n, s in zip(rows, norms, scores):
        expect = sum(a * b for a, b in zip(r, q)) / (n * qn)
        assert math.isclose(s, expect, rel_tol=1e-12, abs_tol=1e-15)
        assert -1.0 <= s <= 1.0


def test_backends_bit_identical():
    from ctirules import _kernels_py

    try:
        from ctirules import _kernels
    except ImportError:
        return
    rng = random.Random(11)
    dims = 33
    flat = array("d", [rng.gauss(0, 1) for _ in range(dims * 50)])
    q = array("d", [rng.gauss(0, 1) for _ in range(dims)])
    n1, n2 = _kernels_py.row_norms(flat, dims), _kernels.row_norms(flat, dims)
    assert list(n1) == list(n2)
    qn1, qn2 = _kernels_py.vector_norm(q), _kernels.vector_norm(q)
    assert qn1 == qn2
    assert list(_kernels_py.cosine_scan(flat, dims, n1, q, qn1)) == list(_kernels.cosine_scan(flat, dims, n2, q, qn2))
    for _ in range(300):
        p = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 8)))
        t = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, 10)))
        assert _kernels_py.wildcard_match(p, t) == _kernels.wildcard_match(p, t)


def test_parallel_vectors_clamped(kernel_impl):
    flat = array("d", [1.0, 1.0, 1.0])
    q = array("d", [2.0, 2.0, 2.0])
    norms = kernel_impl.row_norms(flat, 3)
    s = kernel_impl.cosine_scan(flat, 3, norms, q, kernel_impl.vector_norm(q))[0]
    assert s <= 1.0 and math.isclose(s, 1.0)
