"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import math
import re
from collections import Counter


def dp_wildcard(pattern: str, text: str) -> bool:
    """Table-filling matcher: ``*`` any run, ``?`` one char, everything else literal."""
    n, m = len(pattern), len(text)
    dp = [[False] * (m + 1) for _ in range(n + 1)]
    dp[0][0] = True
    for i in range(1, n + 1):
        if pattern[i - 1] == "*":
            dp[i][0] = dp[i - 1][0]
    for i in range(1, n + 1):
        pc = pattern[i - 1]
        for j in range(1, m + 1):
            if pc == "*":
                dp[i][j] = dp[i - 1][j] or dp[i][j - 1]
            elif pc == "?" or pc == text[j - 1]:
                dp[i][j] = dp[i - 1][j - 1]
    return dp[n][m]


def cosine(a, b) -> float:
    """Same definition as the store: dot / (|a| |b|), clamped to [-1, 1]."""
    dot = 0.0
    for x, y in zip(a, b):
        dot += x * y
    na = 0.0
    for x in a:
        na += x * x
    nb = 0.0
    for y in b:
        nb += y * y
    c = dot / (math.sqrt(na) * math.sqrt(nb))
    return max(-1.0, min(1.0, c))


def brute_topk(records: list[tuple[str, list[float]]], query: list[float], k: int) -> list[tuple[str, float]]:
    """k passes of a full scan, each picking the best remaining (score desc, key asc)."""
    scored = [(key, cosine(vec, query)) for key, vec in records]
    picked: list[tuple[str, float]] = []
    remaining = list(scored)
    for _ in range(min(k, len(remaining))):
        best = remaining[0]
        for cand in remaining[1:]:
            if cand[1] > best[1] or (cand[1] == best[1] and cand[0] < best[0]):
                best = cand
        picked.append(best)
        remaining.remove(best)
    return picked


def bag_cosine(a: str, b: str) -> float:
    """Cosine between raw token-count bags (no hashing)."""
    ca = Counter(re.findall(r"[0-9a-z]+", a.lower()))
    cb = Counter(re.findall(r"[0-9a-z]+", b.lower()))
    dot = sum(ca[t] * cb[t] for t in ca)
    return dot / (math.sqrt(sum(v * v for v in ca.values())) * math.sqrt(sum(v * v for v in cb.values())))


def window_merge(n: int, anchors: list[int], half: int = 1) -> list[tuple[int, int]]:
    """Connected components of the windows under "shares a sentence".

    Windows that only touch end to end share no sentence and stay apart.
    """
    windows = sorted({(max(0, a - half), min(n - 1, a + half)) for a in anchors})
    comp = list(range(len(windows)))

    def root(i):
        while comp[i] != i:
            i = comp[i]
        return i

    for i, (lo1, hi1) in enumerate(windows):
        for j, (lo2, hi2) in enumerate(windows):
            if set(range(lo1, hi1 + 1)) & set(range(lo2, hi2 + 1)):
                comp[root(i)] = root(j)
    groups: dict[int, list[int]] = {}
    for i, w in enumerate(windows):
        groups.setdefault(root(i), []).extend(w)
    return sorted((min(g), max(g)) for g in groups.values())


def brute_nearest(texts: list[str], query: list[float], embed, k: int, exclude=()) -> list[int]:
    scored = [(i, cosine(list(embed(t).values), query)) for i, t in enumerate(texts) if i not in set(exclude)]
    scored.sort(key=lambda it: (-it[1], it[0]))
    return [i for i, _ in scored[:k]]


def double_loop_detection(predicates: dict, events: list) -> tuple[dict, dict]:
    per_rule = {slug: [] for slug in predicates}
    for slug, pred in predicates.items():
        for ev in events:
            if pred(ev.fields):
                per_rule[slug].append(ev.event_id)
    per_event = {ev.event_id: [] for ev in events}
    for ev in events:
        for slug, pred in predicates.items():
            if pred(ev.fields):
                per_event[ev.event_id].append(slug)
    return per_rule, per_event
