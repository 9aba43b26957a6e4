"""Per-stream snippet encoder: two fully-connected layers (1024 -> 1024 ->
128), ReLU on both, dropout after the first, with hand-written backward and
gradient accumulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import STREAMS, FEATURE_DIM, StreamKind
from .numkit import (
    ParamTensor,
    RngStream,
    ShapeError,
    dropout_forward,
    relu_backward,
    relu_forward,
)

HIDDEN_DIM = 1024
EMBED_DIM = 128


@dataclass
class StreamEncoderParams:
    w1: ParamTensor  # (1024, 1024)
    b1: ParamTensor  # (1024,)
    w2: ParamTensor  # (1024, 128)
    b2: ParamTensor  # (128,)

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class EncoderParams:
    streams: dict  # StreamKind -> StreamEncoderParams

    def stream(self, kind: StreamKind) -> StreamEncoderParams:
        return self.streams[kind]

    def tensors(self):
        out = []
        for kind in STREAMS:
            out.extend(self.streams[kind].tensors())
        return out


def _uniform_fan_in(rng: RngStream, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(rng: RngStream) -> EncoderParams:
    """Fan-in uniform weights, zero biases, one independent set per stream."""
    streams = {}
    for kind in STREAMS:
        srng = rng.substream(kind.name.lower())
        prefix = f"encoder/{kind.name.lower()}"
        streams[kind] = StreamEncoderParams(
            w1=ParamTensor(f"{prefix}/w1", _uniform_fan_in(srng.substream("w1"), (FEATURE_DIM, HIDDEN_DIM))),
            b1=ParamTensor(f"{prefix}/b1", np.zeros(HIDDEN_DIM)),
            w2=ParamTensor(f"{prefix}/w2", _uniform_fan_in(srng.substream("w2"), (HIDDEN_DIM, EMBED_DIM))),
            b2=ParamTensor(f"{prefix}/b2", np.zeros(EMBED_DIM)),
        )
    return EncoderParams(streams=streams)


def encode_forward(
    params: EncoderParams,
    x: np.ndarray,
    stream: StreamKind,
    training: bool,
    rng: RngStream | None = None,
    dropout_rate: float = 0.5,
):
    """y = relu(dropout(relu(x W1 + b1)) W2 + b2). Returns (y, cache).

    x is (N, 1024); the output is (N, 128) and entrywise non-negative.
    Training mode needs an rng for the dropout mask.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != FEATURE_DIM:
        raise ShapeError(f"encoder input must be (N, {FEATURE_DIM}), got {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("encoder input contains non-finite values")
    if training and rng is None:
        raise ValueError("training-mode encode_forward needs an rng for dropout")
    p = params.stream(stream)
    z1 = x @ p.w1.value
    z1 += p.b1.value
    h1 = relu_forward(z1)
    h1d, mask = dropout_forward(h1, dropout_rate, rng, training)
    z2 = h1d @ p.w2.value
    z2 += p.b2.value
    y = relu_forward(z2)
    cache = {"x": x, "z1": z1, "mask": mask, "h1d": h1d, "z2": z2, "stream": stream}
    return y, cache


_scratch = {}


def _accumulate_matmul(target: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """target += a @ b through a reused buffer (weight grads are large)."""
    buf = _scratch.get(target.shape)
    if buf is None:
        buf = _scratch[target.shape] = np.empty(target.shape)
    np.matmul(a, b, out=buf)
    target += buf


def encode_backward(
    params: EncoderParams, cache, upstream: np.ndarray, compute_input_grad: bool = True
):
    """Accumulate (+=) parameter gradients; returns d(loss)/d(input), or
    None when `compute_input_grad` is off (inputs are raw features)."""
    upstream = np.asarray(upstream, dtype=np.float64)
    z2 = cache["z2"]
    if upstream.shape != z2.shape:
        raise ShapeError(f"encoder upstream shape {upstream.shape} != cached {z2.shape}")
    p = params.stream(cache["stream"])
    dz2 = relu_backward(z2, upstream)
    _accumulate_matmul(p.w2.grad, cache["h1d"].T, dz2)
    p.b2.grad += dz2.sum(axis=0)
    dh1d = dz2 @ p.w2.value.T
    dh1 = dh1d * cache["mask"]
    dz1 = relu_backward(cache["z1"], dh1)
    _accumulate_matmul(p.w1.grad, cache["x"].T, dz1)
    p.b1.grad += dz1.sum(axis=0)
    if not compute_input_grad:
        return None
    return dz1 @ p.w1.value.T
