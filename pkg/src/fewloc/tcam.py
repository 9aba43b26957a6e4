"""The attention generator: batch normalization over the four similarity
channels followed by a 4 -> 1 linear map, producing per-class temporal
attention masks; plus temporal softmax normalization and K-shot averaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import (
    ParamTensor,
    RngStream,
    ShapeError,
    batchnorm_backward,
    batchnorm_forward,
    softmax_columns,
)
from .tsm import CANONICAL_COMBOS

NUM_CHANNELS = len(CANONICAL_COMBOS)


@dataclass
class GeneratorParams:
    bn_scale: ParamTensor      # (4,)
    bn_shift: ParamTensor      # (4,)
    running_mean: np.ndarray   # (4,)
    running_var: np.ndarray    # (4,)
    fusion_w: ParamTensor      # (4, 1)
    fusion_b: ParamTensor      # (1,)

    def tensors(self):
        return [self.bn_scale, self.bn_shift, self.fusion_w, self.fusion_b]


def init_generator(rng: RngStream) -> GeneratorParams:
    # fusion weights start positive: every input channel is a similarity, so
    # higher values vote for action at initialization
    bound = 1.0 / math.sqrt(NUM_CHANNELS)
    return GeneratorParams(
        bn_scale=ParamTensor("generator/bn_scale", np.ones(NUM_CHANNELS)),
        bn_shift=ParamTensor("generator/bn_shift", np.zeros(NUM_CHANNELS)),
        running_mean=np.zeros(NUM_CHANNELS),
        running_var=np.ones(NUM_CHANNELS),
        fusion_w=ParamTensor("generator/fusion_w", rng.uniform(0.0, bound, size=(NUM_CHANNELS, 1))),
        fusion_b=ParamTensor("generator/fusion_b", np.zeros(1)),
    )


def attention_forward(
    channels: np.ndarray,
    params: GeneratorParams,
    training: bool,
    update_running: bool = False,
):
    """channels is (N, 4) stacked similarity values; returns (attention, cache).

    The output is unbounded (no activation after the linear map). During
    training the whole N-row batch defines the normalization statistics.
    """
    channels = np.asarray(channels, dtype=np.float64)
    if channels.ndim != 2 or channels.shape[1] != NUM_CHANNELS:
        raise ShapeError(f"attention input must be (N, {NUM_CHANNELS}), got {channels.shape}")
    normed, bn_cache = batchnorm_forward(
        channels,
        params.bn_scale.value,
        params.bn_shift.value,
        params.running_mean,
        params.running_var,
        training=training,
        update_running=update_running,
    )
    attn = (normed @ params.fusion_w.value)[:, 0] + params.fusion_b.value[0]
    cache = {"bn_cache": bn_cache, "normed": normed}
    return attn, cache


def attention_backward(params: GeneratorParams, cache, d_attn: np.ndarray) -> np.ndarray:
    """Accumulate generator gradients; returns gradient on the (N, 4) input."""
    d_attn = np.asarray(d_attn, dtype=np.float64)
    normed = cache["normed"]
    if d_attn.shape != (normed.shape[0],):
        raise ShapeError(f"attention gradient must be ({normed.shape[0]},), got {d_attn.shape}")
    params.fusion_w.grad += normed.T @ d_attn[:, None]
    params.fusion_b.grad += np.array([d_attn.sum()])
    d_normed = d_attn[:, None] @ params.fusion_w.value.T
    dx, dgamma, dbeta = batchnorm_backward(cache["bn_cache"], d_normed)
    params.bn_scale.grad += dgamma
    params.bn_shift.grad += dbeta
    return dx


def _check_bundle(bundle):
    if len(bundle) != NUM_CHANNELS:
        raise ShapeError(f"bundle must hold {NUM_CHANNELS} similarity vectors, got {len(bundle)}")
    lengths = {len(v.values) for v in bundle}
    if len(lengths) != 1:
        raise ShapeError(f"bundle vectors disagree on length: {lengths}")
    for vec, (metric, stream) in zip(bundle, CANONICAL_COMBOS):
        if vec.metric is not metric or vec.stream is not stream:
            raise ShapeError(
                f"bundle out of canonical order: got ({vec.metric}, {vec.stream}), "
                f"expected ({metric}, {stream})"
            )


def generate_attention(bundle, params: GeneratorParams, training: bool) -> np.ndarray:
    """Raw per-snippet attention for one (query, reference) similarity bundle."""
    _check_bundle(bundle)
    channels = np.stack([v.values for v in bundle], axis=1)
    attn, _ = attention_forward(channels, params, training=training)
    return attn


def normalize_tcam(raw: np.ndarray) -> np.ndarray:
    """Column-wise softmax along the temporal axis; each class column sums
    to 1 and keeps the temporal argmax of its raw column."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    return softmax_columns(raw)


def kshot_average(attns) -> np.ndarray:
    """Entrywise mean of K raw attention vectors for one class."""
    attns = [np.asarray(a, dtype=np.float64) for a in attns]
    if not attns:
        raise ShapeError("kshot_average needs at least one attention vector")
    lengths = {a.shape for a in attns}
    if len(lengths) != 1:
        raise ShapeError(f"attention lengths differ: {lengths}")
    return np.mean(attns, axis=0)
