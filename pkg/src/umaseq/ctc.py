"""CTC loss over an alphabet extended with a trailing blank symbol.

The loss is the negative log of the summed probability of every length-L
symbol path that collapses to the target (merge equal-symbol runs, then drop
blanks). It is computed with the usual forward-backward recursion over the
2U+1 blank-interleaved states, entirely in log space via log-sum-exp; the
gradient with respect to the logits comes from the state posteriors. A
brute-force path enumeration over the same definition serves as an
independent oracle for small instances.

The blank symbol is always the last column of the logits (index K), so real
tokens occupy 0..K-1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import numcore as nc

NEG_INF = -np.inf

BRUTE_FORCE_PATH_LIMIT = 10**7


class CtcError(Exception):
    pass


class CtcInfeasibleError(CtcError):
    """Target cannot be produced by any length-L path."""


class CtcTooLargeError(CtcError):
    """Brute-force enumeration refused: path count over the limit."""


@dataclass
class CtcResult:
    loss: float                # -log p(target | logits), nats
    grad: np.ndarray           # (L, K+1), d(loss)/d(logits)


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge runs of equal symbols, then remove blanks."""
    out: list[int] = []
    prev = None
    for sym in path:
        if sym != prev:
            if sym != blank:
                out.append(sym)
            prev = sym
    return out


def duplicate_pairs(target: Sequence[int]) -> int:
    return sum(1 for a, b in zip(target, target[1:]) if a == b)


def min_path_length(target: Sequence[int]) -> int:
    """Shortest path that can collapse to the target (duplicates need a separating blank)."""
    return len(target) + duplicate_pairs(target)


def _validate(logits: np.ndarray, target: Sequence[int]) -> tuple[np.ndarray, list[int], int]:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ValueError(f"logits must be (L, K+1) with L>=1, K>=1, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    blank = logits.shape[1] - 1
    target = [int(t) for t in target]
    if any(t < 0 or t >= blank for t in target):
        raise ValueError(f"target tokens must lie in [0, {blank - 1}]")
    return logits, target, blank


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _shift_down(v: np.ndarray, k: int) -> np.ndarray:
    """v moved k slots toward higher indices, -inf (or 0 for bools) filled in."""
    out = np.full_like(v, NEG_INF)
    if k < v.shape[0]:
        out[k:] = v[:-k]
    return out


def _shift_up(v: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(v, NEG_INF)
    if k < v.shape[0]:
        out[:-k] = v[k:]
    return out


def ctc_loss(logits: np.ndarray, target: Sequence[int]) -> CtcResult:
    """Forward-backward CTC loss and its analytic logits gradient.

    Raises CtcInfeasibleError when L is shorter than the minimal path for the
    target, rather than returning an infinite loss.
    """
    logits, target, blank = _validate(logits, target)
    L = logits.shape[0]
    U = len(target)
    if L < min_path_length(target):
        raise CtcInfeasibleError(
            f"target of length {U} with {duplicate_pairs(target)} adjacent duplicates "
            f"needs at least {min_path_length(target)} steps, got {L}"
        )

    lp = _log_softmax(logits)
    S = 2 * U + 1
    labels = np.full(S, blank, dtype=np.intp)
    labels[1::2] = target
    # skip transition s-2 -> s exists for odd (token) states whose token
    # differs from the previous token
    skip_ok = np.zeros(S, dtype=bool)
    for s in range(3, S, 2):
        skip_ok[s] = target[(s - 1) // 2] != target[(s - 3) // 2]

    lp_lab = lp[:, labels]  # (L, S)

    alpha = np.full((L, S), NEG_INF)
    alpha[0, 0] = lp_lab[0, 0]
    if S > 1:
        alpha[0, 1] = lp_lab[0, 1]
    for t in range(1, L):
        prev = alpha[t - 1]
        acc = np.logaddexp(prev, _shift_down(prev, 1))
        skip = np.where(skip_ok, _shift_down(prev, 2), NEG_INF)
        alpha[t] = np.logaddexp(acc, skip) + lp_lab[t]

    log_z = alpha[L - 1, S - 1] if S == 1 else np.logaddexp(alpha[L - 1, S - 1], alpha[L - 1, S - 2])
    if not np.isfinite(log_z):  # unreachable given the pre-check; defensive
        raise CtcInfeasibleError("no feasible path")

    # beta excludes the emission at its own time step, so alpha + beta is the
    # log-probability of all paths through (t, s)
    beta = np.full((L, S), NEG_INF)
    beta[L - 1, S - 1] = 0.0
    if S > 1:
        beta[L - 1, S - 2] = 0.0
    can_skip_out = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip_out[:-2] = skip_ok[2:]
    for t in range(L - 2, -1, -1):
        nxt = beta[t + 1] + lp_lab[t + 1]
        acc = np.logaddexp(nxt, _shift_up(nxt, 1))
        skip = np.where(can_skip_out, _shift_up(nxt, 2), NEG_INF)
        beta[t] = np.logaddexp(acc, skip)

    occupancy = np.exp(alpha + beta - log_z)  # (L, S), rows sum to 1
    posterior = np.zeros_like(lp)
    for s in range(S):
        posterior[:, labels[s]] += occupancy[:, s]

    grad = np.exp(lp) - posterior
    return CtcResult(loss=float(-log_z), grad=grad)


def ctc_loss_op(logits: nc.Tensor, target: Sequence[int]) -> nc.Tensor:
    """ctc_loss as a taped scalar so it can sit inside a larger graph."""
    res = ctc_loss(logits.data, target)

    def bwd(g):
        return (float(g) * res.grad,)

    return nc.custom([logits], np.asarray(res.loss), bwd, op="ctc_loss")


@lru_cache(maxsize=None)
def _path_table(L: int, n_symbols: int) -> tuple[np.ndarray, dict]:
    """All (n_symbols)^L paths and a map collapsed-tuple -> path row indices."""
    blank = n_symbols - 1
    paths = np.array(list(itertools.product(range(n_symbols), repeat=L)), dtype=np.int16)
    groups: dict[tuple, list[int]] = {}
    for row, path in enumerate(paths):
        key = tuple(collapse(path.tolist(), blank))
        groups.setdefault(key, []).append(row)
    index = {key: np.asarray(rows, dtype=np.intp) for key, rows in groups.items()}
    return paths, index


def ctc_brute_force(logits: np.ndarray, target: Sequence[int]) -> float:
    """Loss by exhaustive path enumeration; the oracle for ctc_loss.

    Works in plain probability space: softmax per row, product along each
    path, sum over the paths whose collapse equals the target.
    """
    logits, target, blank = _validate(logits, target)
    L, n_symbols = logits.shape
    if n_symbols ** L > BRUTE_FORCE_PATH_LIMIT:
        raise CtcTooLargeError(f"{n_symbols}^{L} paths exceed limit {BRUTE_FORCE_PATH_LIMIT}")

    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)

    paths, index = _path_table(L, n_symbols)
    rows = index.get(tuple(target))
    if rows is None:
        raise CtcInfeasibleError(f"no length-{L} path collapses to the target")
    selected = paths[rows]  # (M, L)
    path_probs = probs[np.arange(L)[None, :], selected].prod(axis=1)
    return float(-np.log(path_probs.sum()))


def greedy_decode(logits: np.ndarray) -> list[int]:
    """Best path decoding: per-row argmax (ties to the smallest index), collapsed."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be 2-d, got {logits.shape}")
    blank = logits.shape[1] - 1
    return collapse(np.argmax(logits, axis=1).tolist(), blank)
