"""Valley-based segmentation of weight sequences and weighted frame pooling.

A frame t is a weight valley when its weight is <= both neighbours; the
first and last frames always count as valleys so no frame is dropped.
Consecutive valleys bound one segment per valley pair, and every segment is
extended one frame past its right valley, so neighbouring segments share two
frames. Each segment is pooled into a single vector by the weight-normalized
average of its frames.

The segmentation itself is a discrete choice and is treated as a constant in
the backward pass; gradients flow only through the normalized average, and
frames in the two-frame overlaps accumulate gradient from both segments.

Frame indices in Segmentation are 1-based and inclusive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc

DENOM_FLOOR = 1e-8  # single-precision safety net; never binds in float64 use


@dataclass(frozen=True)
class Segmentation:
    """Valley indices and the segment ranges they induce (1-based, inclusive)."""

    valleys: tuple[int, ...]
    segments: tuple[tuple[int, int], ...]
    n_frames: int

    @property
    def num_segments(self) -> int:
        return len(self.segments)


def detect_valleys(alpha) -> Segmentation:
    """Find valleys of a weight vector and derive overlapping segments.

    Interior t (2..T-1) is a valley iff alpha[t] <= alpha[t-1] and
    alpha[t] <= alpha[t+1]; both endpoints are always valleys. Within a run
    of consecutive interior valleys (exact ties only) the first one is kept.
    Segment i spans [valley_i, min(valley_{i+1} + 1, T)].
    """
    a = np.asarray(alpha, dtype=np.float64).ravel()
    T = a.shape[0]
    if T < 1:
        raise ValueError("alpha must have at least one frame")
    if T == 1:
        return Segmentation(valleys=(1,), segments=((1, 1),), n_frames=1)

    interior = np.flatnonzero((a[1:-1] <= a[:-2]) & (a[1:-1] <= a[2:])) + 1  # 0-based
    kept: list[int] = []
    prev = None
    for t in interior.tolist():
        if prev is None or t != prev + 1:
            kept.append(t)  # plateau: keep only the first index of a tied run
        prev = t

    valleys = [1] + [t + 1 for t in kept] + [T]
    segments = tuple(
        (valleys[i], min(valleys[i + 1] + 1, T)) for i in range(len(valleys) - 1)
    )
    return Segmentation(valleys=tuple(valleys), segments=segments, n_frames=T)


def _check_consistent(seg: Segmentation, T: int) -> None:
    if seg.n_frames != T:
        raise ValueError(f"segmentation built for {seg.n_frames} frames, got {T}")


def aggregate(h: np.ndarray, alpha, seg: Segmentation) -> np.ndarray:
    """Pool each segment of h into the weight-normalized average of its rows.

    Returns an (I, D) matrix where row i is
    sum(alpha_t * h_t) / sum(alpha_t) over segment i. The denominator is
    floored at DENOM_FLOOR, which leaves any sane weight sum untouched.
    """
    h = np.asarray(h, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64).ravel()
    if h.ndim != 2 or h.shape[0] != a.shape[0]:
        raise ValueError(f"h {h.shape} does not match {a.shape[0]} weights")
    _check_consistent(seg, a.shape[0])
    out = np.empty((seg.num_segments, h.shape[1]))
    for i, (start, end) in enumerate(seg.segments):
        w = a[start - 1 : end]
        denom = max(w.sum(), DENOM_FLOOR)
        out[i] = (w @ h[start - 1 : end]) / denom
    return out


def aggregate_backward(
    grad_c: np.ndarray, h: np.ndarray, alpha, seg: Segmentation
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of aggregate() for a fixed segmentation.

    d(c_i)/d(h_t) = alpha_t / S_i for every t in segment i, and
    d(c_i)/d(alpha_t) = (h_t - c_i) / S_i with S_i the segment weight sum;
    frames shared by two segments sum both contributions.
    """
    h = np.asarray(h, dtype=np.float64)
    a = np.asarray(alpha, dtype=np.float64).ravel()
    grad_c = np.asarray(grad_c, dtype=np.float64)
    _check_consistent(seg, a.shape[0])
    if grad_c.shape != (seg.num_segments, h.shape[1]):
        raise ValueError(f"grad_c {grad_c.shape} vs ({seg.num_segments}, {h.shape[1]})")
    grad_h = np.zeros_like(h)
    grad_a = np.zeros_like(a)
    for i, (start, end) in enumerate(seg.segments):
        sl = slice(start - 1, end)
        w = a[sl]
        denom = max(w.sum(), DENOM_FLOOR)
        c_i = (w @ h[sl]) / denom
        g = grad_c[i]
        grad_h[sl] += np.outer(w, g) / denom
        grad_a[sl] += (h[sl] - c_i) @ g / denom
    return grad_h, grad_a


def uma_forward(h: np.ndarray, alpha) -> tuple[np.ndarray, Segmentation]:
    """detect_valleys then aggregate, returning the segmentation for inspection."""
    seg = detect_valleys(alpha)
    return aggregate(h, alpha, seg), seg


def uma_op(h: nc.Tensor, alpha: nc.Tensor) -> tuple[nc.Tensor, Segmentation]:
    """Taped aggregation; alpha may be (T,) or a (T, 1) column.

    The valley detection is recomputed from the current weights on every
    call, but backward differentiates only the pooling, holding the detected
    segmentation fixed.
    """
    a = alpha.data.ravel()
    seg = detect_valleys(a)
    c = aggregate(h.data, a, seg)

    def bwd(g):
        gh, ga = aggregate_backward(g, h.data, a, seg)
        return gh, ga.reshape(alpha.data.shape)

    return nc.custom([h, alpha], c, bwd, op="uma"), seg
