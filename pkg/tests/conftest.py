"""Shared test helpers: brute-force oracles kept independent of the library."""

from functools import lru_cache

import numpy as np


def enumerate_edit_alignments(ref: tuple, hyp: tuple) -> tuple[int, set]:
    """Exhaustive alignment search: minimal distance and every optimal
    (sub, del, ins) count triple. Independent of the DP implementation."""

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> tuple[int, frozenset]:
        if i == len(ref) and j == len(hyp):
            return 0, frozenset({(0, 0, 0)})
        options = []
        if i < len(ref) and j < len(hyp):
            cost = int(ref[i] != hyp[j])
            d, triples = go(i + 1, j + 1)
            options.append((d + cost, {(s + cost, de, ins) for s, de, ins in triples}))
        if i < len(ref):
            d, triples = go(i + 1, j)
            options.append((d + 1, {(s, de + 1, ins) for s, de, ins in triples}))
        if j < len(hyp):
            d, triples = go(i, j + 1)
            options.append((d + 1, {(s, de, ins + 1) for s, de, ins in triples}))
        best = min(d for d, _ in options)
        merged = set()
        for d, triples in options:
            if d == best:
                merged |= triples
        return best, frozenset(merged)

    distance, triples = go(0, 0)
    go.cache_clear()
    return distance, set(triples)


def random_feasible_target(rng: np.random.Generator, n_tokens: int, vocab: int,
                           max_len: int) -> list[int]:
    """A target that fits in max_len steps after blank-separated duplicates."""
    while True:
        target = rng.integers(0, vocab, size=n_tokens).tolist()
        dups = sum(1 for a, b in zip(target, target[1:]) if a == b)
        if n_tokens + dups <= max_len:
            return target
