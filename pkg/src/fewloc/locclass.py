"""Localization (threshold, group, score), attention-weighted classification
and the video-level cross-entropy loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import STREAMS
from .numkit import ShapeError, softmax


class ThresholdError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdPolicy:
    """How the localization threshold is chosen from a raw attention vector.

    kind: "midrange"        -> (max + min) / 2
          "fixed"           -> the constant `delta`
          "length_matched"  -> bisection until the mean predicted segment
                               length lands near a per-class reference length
    """

    kind: str = "midrange"
    delta: float = 0.0
    tolerance_frac: float = 0.1
    max_iterations: int = 50

    def __post_init__(self):
        if self.kind not in ("midrange", "fixed", "length_matched"):
            raise ThresholdError(f"unknown threshold policy {self.kind!r}")


@dataclass(frozen=True)
class ActionPrediction:
    """One detection over an inclusive snippet run [start, end]."""

    class_local_index: int
    start: int
    end: int
    score: float


def localize(attn: np.ndarray, delta: float, class_local_index: int = 0):
    """Maximal runs of snippets with attention strictly above delta; each
    run scores the mean attention of its own snippets."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 1:
        raise ShapeError(f"attention must be 1-D, got shape {attn.shape}")
    out = []
    start = None
    for i, value in enumerate(attn):
        if value > delta:
            if start is None:
                start = i
        elif start is not None:
            out.append(_run(attn, start, i - 1, class_local_index))
            start = None
    if start is not None:
        out.append(_run(attn, start, len(attn) - 1, class_local_index))
    return out


def _run(attn, start, end, class_local_index):
    return ActionPrediction(
        class_local_index=class_local_index,
        start=start,
        end=end,
        score=float(attn[start : end + 1].mean()),
    )


def _mean_segment_length(attn, delta):
    runs = localize(attn, delta)
    if not runs:
        return 0.0
    return float(np.mean([r.end - r.start + 1 for r in runs]))


def resolve_threshold(attn: np.ndarray, policy: ThresholdPolicy, reference_length: float | None = None):
    """Returns (delta, fell_back). `reference_length` (snippets) is required
    by the length-matched policy; when no delta yields any segment, the
    policy falls back to midrange and flags it."""
    attn = np.asarray(attn, dtype=np.float64)
    if attn.size < 1:
        raise ShapeError("cannot derive a threshold from an empty attention vector")
    if policy.kind == "fixed":
        return float(policy.delta), False
    lo, hi = float(attn.min()), float(attn.max())
    midrange = (lo + hi) / 2.0
    if policy.kind == "midrange":
        return midrange, False
    if reference_length is None or reference_length <= 0.0:
        raise ThresholdError("length-matched policy needs a positive reference length")
    if hi == lo:
        return midrange, True  # constant attention: no attainable segments
    tolerance = policy.tolerance_frac * reference_length
    best_delta, best_err, best_len = midrange, np.inf, 0.0
    span_lo, span_hi = lo, hi
    for _ in range(policy.max_iterations):
        delta = (span_lo + span_hi) / 2.0
        mean_len = _mean_segment_length(attn, delta)
        err = abs(mean_len - reference_length)
        if err < best_err:
            best_delta, best_err, best_len = delta, err, mean_len
        if err <= tolerance:
            break
        if mean_len > reference_length:
            span_lo = delta  # segments too long: raise the threshold
        else:
            span_hi = delta
    if best_len == 0.0:
        return midrange, True
    return best_delta, False


def query_class_repr(norm_attn: np.ndarray, query_embeds: dict) -> np.ndarray:
    """Attention-weighted temporal pooling of the concatenated per-stream
    embeddings: row c = sum_i norm_attn[i, c] * [rgb_i || flow_i]."""
    norm_attn = np.asarray(norm_attn, dtype=np.float64)
    concat = np.hstack([query_embeds[s] for s in STREAMS])
    if norm_attn.ndim != 2 or norm_attn.shape[0] != concat.shape[0]:
        raise ShapeError(
            f"attention rows {norm_attn.shape} do not match embeddings {concat.shape}"
        )
    return norm_attn.T @ concat


def sample_repr(ref_embeds: dict) -> np.ndarray:
    """Plain temporal mean of the concatenated per-stream embeddings."""
    concat = np.hstack([ref_embeds[s] for s in STREAMS])
    if concat.shape[0] < 1:
        raise ShapeError("reference video has no snippets")
    return concat.mean(axis=0)


def class_distances(x_q: np.ndarray, prototypes) -> np.ndarray:
    """d_c = mean over the K shots of ||x_q[c] - prototype||^2."""
    x_q = np.asarray(x_q, dtype=np.float64)
    if x_q.ndim != 2 or x_q.shape[0] != len(prototypes):
        raise ShapeError(f"x_q {x_q.shape} does not match {len(prototypes)} classes")
    dists = np.zeros(len(prototypes))
    for c, shots in enumerate(prototypes):
        if not shots:
            raise ShapeError(f"class {c} has no prototypes")
        diffs = x_q[c] - np.asarray(shots, dtype=np.float64)
        dists[c] = float((diffs * diffs).sum(axis=1).mean())
    return dists


def classify(x_q: np.ndarray, prototypes) -> np.ndarray:
    """Class scores: softmax over classes of the negated distances."""
    return softmax(-class_distances(x_q, prototypes))


def class_loss(scores: np.ndarray, labels: np.ndarray):
    """Cross entropy against the multi-hot labels normalized to sum 1.

    Returns (loss, d_logits) where d_logits is the exact gradient w.r.t.
    the negated distances that fed the score softmax.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ShapeError(f"scores {scores.shape} vs labels {labels.shape}")
    positives = labels.sum()
    if positives <= 0.0:
        raise ValueError("label vector has no positive class")
    target = labels / positives
    loss = float(-(target * np.log(np.maximum(scores, 1e-300))).sum())
    return loss, scores - target
