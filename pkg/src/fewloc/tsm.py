"""Temporal similarity matrices between query and reference snippet
embeddings, their row-max reduction to per-snippet similarity vectors, and
the canonical four-vector bundle (cosine/dot x RGB/flow).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .dataio import STREAMS, StreamKind
from .numkit import ShapeError


class SimilarityMetric(enum.Enum):
    COSINE = "cosine"
    DOT = "dot"
    EUCLIDEAN = "euclidean"  # ablation mode; negated distance so row-max still applies


#: Channel order of the attention generator's input.
CANONICAL_COMBOS = (
    (SimilarityMetric.COSINE, StreamKind.RGB),
    (SimilarityMetric.COSINE, StreamKind.FLOW),
    (SimilarityMetric.DOT, StreamKind.RGB),
    (SimilarityMetric.DOT, StreamKind.FLOW),
)


@dataclass
class TSM:
    matrix: np.ndarray  # (N_q, N_v)
    metric: SimilarityMetric
    stream: StreamKind | None = None
    class_local_index: int | None = None
    cache: dict | None = None  # forward intermediates for tsm_backward


@dataclass
class SimilarityVector:
    values: np.ndarray  # (N_q,)
    metric: SimilarityMetric
    stream: StreamKind | None = None
    class_local_index: int | None = None
    argmax: np.ndarray | None = None  # per-row winning reference snippet


def _safe_inv_norms(m: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    inv = np.zeros_like(norms)
    nz = norms > 0.0
    inv[nz] = 1.0 / norms[nz]
    return inv


def _tsm_from_gram(gram, q, v, metric, stream, class_local_index):
    cache = {"q": q, "v": v}
    if metric is SimilarityMetric.DOT:
        m = gram
    elif metric is SimilarityMetric.COSINE:
        inv_q = _safe_inv_norms(q)
        inv_v = _safe_inv_norms(v)
        m = gram * inv_q[:, None] * inv_v[None, :]
        cache.update(inv_q=inv_q, inv_v=inv_v, cos=m)
    elif metric is SimilarityMetric.EUCLIDEAN:
        sq = np.einsum("ij,ij->i", q, q)[:, None] + np.einsum("ij,ij->i", v, v)[None, :] - 2.0 * gram
        dist = np.sqrt(np.maximum(sq, 0.0))
        m = -dist
        cache.update(dist=dist)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return TSM(matrix=m, metric=metric, stream=stream,
               class_local_index=class_local_index, cache=cache)


def compute_tsm(
    query_emb: np.ndarray,
    ref_emb: np.ndarray,
    metric: SimilarityMetric,
    stream: StreamKind | None = None,
    class_local_index: int | None = None,
) -> TSM:
    """Dense pairwise similarities; entry (i, j) compares query snippet i to
    reference snippet j. Cosine against a zero vector is defined as 0."""
    q = np.asarray(query_emb, dtype=np.float64)
    v = np.asarray(ref_emb, dtype=np.float64)
    if q.ndim != 2 or v.ndim != 2 or q.shape[1] != v.shape[1]:
        raise ShapeError(f"embedding dims differ: {q.shape} vs {v.shape}")
    return _tsm_from_gram(q @ v.T, q, v, metric, stream, class_local_index)


def pair_tsms(query_embeds: dict, ref_embeds: dict, channels, class_local_index=None):
    """TSMs for all requested (metric, stream) combos of one query/reference
    pair, sharing one Gram matrix per stream."""
    grams = {}
    out = []
    for metric, stream in channels:
        q, v = query_embeds[stream], ref_embeds[stream]
        if stream not in grams:
            if q.shape[1] != v.shape[1]:
                raise ShapeError(f"embedding dims differ: {q.shape} vs {v.shape}")
            grams[stream] = q @ v.T
        out.append(_tsm_from_gram(grams[stream], q, v, metric, stream, class_local_index))
    return out


def tsm_backward(tsm: TSM, d_matrix: np.ndarray):
    """Gradients of a scalar loss w.r.t. both embedding matrices."""
    d = np.asarray(d_matrix, dtype=np.float64)
    if d.shape != tsm.matrix.shape:
        raise ShapeError(f"gradient shape {d.shape} != TSM shape {tsm.matrix.shape}")
    q, v = tsm.cache["q"], tsm.cache["v"]
    if tsm.metric is SimilarityMetric.DOT:
        return d @ v, d.T @ q
    if tsm.metric is SimilarityMetric.COSINE:
        inv_q, inv_v, cos = tsm.cache["inv_q"], tsm.cache["inv_v"], tsm.cache["cos"]
        dq = ((d * inv_v[None, :]) @ v) * inv_q[:, None] \
            - ((d * cos).sum(axis=1) * inv_q * inv_q)[:, None] * q
        dv = ((d * inv_q[:, None]).T @ q) * inv_v[:, None] \
            - ((d * cos).sum(axis=0) * inv_v * inv_v)[:, None] * v
        return dq, dv
    if tsm.metric is SimilarityMetric.EUCLIDEAN:
        dist = tsm.cache["dist"]
        w = np.zeros_like(dist)
        nz = dist > 0.0
        w[nz] = d[nz] / dist[nz]
        dq = -(w.sum(axis=1)[:, None] * q - w @ v)
        dv = -(w.sum(axis=0)[:, None] * v - w.T @ q)
        return dq, dv
    raise ValueError(f"unknown metric {tsm.metric!r}")


def maxpool_rows(tsm: TSM) -> SimilarityVector:
    """Row-max over the reference axis: one similarity score per query snippet."""
    m = tsm.matrix
    if m.shape[1] < 1:
        raise ShapeError("cannot max-pool over an empty reference axis")
    argmax = m.argmax(axis=1)
    values = m[np.arange(m.shape[0]), argmax]
    return SimilarityVector(
        values=values,
        metric=tsm.metric,
        stream=tsm.stream,
        class_local_index=tsm.class_local_index,
        argmax=argmax,
    )


def maxpool_backward(vec: SimilarityVector, shape, d_values: np.ndarray) -> np.ndarray:
    """Route gradient to each row's winning entry (first max on ties)."""
    d_values = np.asarray(d_values, dtype=np.float64)
    if d_values.shape != vec.values.shape:
        raise ShapeError(f"gradient shape {d_values.shape} != values {vec.values.shape}")
    out = np.zeros(shape)
    out[np.arange(shape[0]), vec.argmax] = d_values
    return out


def similarity_bundle(query_embeds: dict, ref_embeds: dict, class_local_index: int | None = None):
    """The ordered (cos-RGB, cos-FLOW, dot-RGB, dot-FLOW) similarity vectors
    for one query/reference pair. Returns (vectors, tsms)."""
    n_q = {query_embeds[s].shape[0] for s in STREAMS}
    n_v = {ref_embeds[s].shape[0] for s in STREAMS}
    if len(n_q) != 1 or len(n_v) != 1:
        raise ShapeError(f"streams disagree on snippet counts: N_q={n_q}, N_v={n_v}")
    tsms = pair_tsms(query_embeds, ref_embeds, CANONICAL_COMBOS, class_local_index)
    vectors = [maxpool_rows(t) for t in tsms]
    return vectors, tsms
