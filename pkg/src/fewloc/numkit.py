"""Dense float64 linear algebra primitives with hand-written backward passes,
the Adam optimizer, seeded named random streams, and a finite-difference
gradient checker. Everything operates on 2-D C-contiguous float64 arrays.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericsError(RuntimeError):
    """A NaN/Inf showed up where the contract forbids it."""


class GradCheckProtocolError(RuntimeError):
    """The loss function handed to grad_check is not deterministic."""


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D C-contiguous float64 array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


class RngStream:
    """Named, counter-based random stream (Philox keyed by seed + path).

    Substreams derived from the same (seed, path) always replay the same
    sequence, independent of draw order elsewhere, so dropout, episode
    sampling and data generation stay reproducible in isolation.
    """

    def __init__(self, seed: int, path: str = ""):
        self.seed = int(seed)
        self.path = path
        digest = hashlib.sha256(f"{self.seed}:{path}".encode()).digest()
        key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.path}/{name}")

    def random(self, size=None):
        return self._gen.random(size)

    def random_f32(self, size=None):
        """float32 uniforms in [0, 1); cheaper draws for mask thresholds."""
        return self._gen.random(size, dtype=np.float32)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, items, size=None, replace=True):
        return self._gen.choice(items, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"


# ---------------------------------------------------------------------------
# Parameters and Adam
# ---------------------------------------------------------------------------


@dataclass
class ParamTensor:
    """A trainable tensor with its gradient and Adam moment buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.m is None:
            self.m = np.zeros_like(self.value)
        if self.v is None:
            self.v = np.zeros_like(self.value)
        shapes = {self.value.shape, self.grad.shape, self.m.shape, self.v.shape}
        if len(shapes) != 1:
            raise ShapeError(f"{self.name}: value/grad/m/v shapes differ: {shapes}")

    def zero_grad(self):
        self.grad[...] = 0.0


@dataclass
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError(f"betas must lie in (0,1): {self.beta1}, {self.beta2}")
        if self.epsilon <= 0.0 or self.learning_rate <= 0.0:
            raise ValueError("learning_rate and epsilon must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")


_adam_scratch = {}


def _scratch(tag: str, shape) -> np.ndarray:
    buf = _adam_scratch.get((tag, shape))
    if buf is None:
        buf = _adam_scratch[(tag, shape)] = np.empty(shape)
    return buf


def adam_step(params, cfg: AdamConfig) -> None:
    """One Adam update over `params`; zeroes gradients and bumps step_count.

    Weight decay enters as an L2 term added to the gradient before the
    moment updates (classic Adam+L2, not decoupled). Updates run in place
    through reused scratch buffers; allocating temporaries for the large
    weight matrices would otherwise dominate the step cost.
    """
    tensors = list(params)
    for p in tensors:
        if np.isnan(p.grad).any():
            raise NumericsError(f"NaN gradient in parameter {p.name!r}")
    t = cfg.step_count + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for p in tensors:
        shape = p.value.shape
        g = p.grad
        if cfg.weight_decay != 0.0:
            g = np.multiply(p.value, cfg.weight_decay, out=_scratch("g", shape))
            g += p.grad
        work = _scratch("w", shape)
        # v <- beta2 v + (1-beta2) g^2, then m <- beta1 m + (1-beta1) g
        p.v *= cfg.beta2
        np.multiply(g, g, out=work)
        work *= 1.0 - cfg.beta2
        p.v += work
        p.m *= cfg.beta1
        np.multiply(g, 1.0 - cfg.beta1, out=work)
        p.m += work
        # value <- value - lr * (m / bc1) / (sqrt(v / bc2) + eps)
        np.divide(p.v, bc2, out=work)
        np.sqrt(work, out=work)
        work += cfg.epsilon
        np.divide(p.m, work, out=work)
        work *= cfg.learning_rate / bc1
        p.value -= work
        p.zero_grad()
    cfg.step_count = t


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    """Matrix product with k-ordered accumulation.

    Accumulates rank-1 updates in index order, so the result is bit-identical
    to the naive triple loop (no BLAS reordering/FMA). Meant for small
    matrices; hot paths use `@` directly.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def relu_forward(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, upstream) -> np.ndarray:
    """Masked upstream; subgradient at 0 is 0."""
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if x.shape != upstream.shape:
        raise ShapeError(f"relu_backward shape mismatch: {x.shape} vs {upstream.shape}")
    return upstream * (x > 0.0)


def dropout_forward(x, rate: float, rng: RngStream, training: bool):
    """Inverted dropout. Returns (output, mask); backward is `upstream * mask`."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0,1): {rate}")
    x = np.asarray(x, dtype=np.float64)
    if not training or rate == 0.0:
        return x.copy(), np.ones_like(x)
    keep = rng.random_f32(x.shape) >= rate
    mask = keep / (1.0 - rate)
    return x * mask, mask


def batchnorm_forward(
    x,
    gamma,
    beta,
    running_mean,
    running_var,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
    update_running: bool = False,
):
    """Per-column batch normalization. x is (N, c); gamma/beta/stats are (c,).

    Training mode normalizes by batch statistics (biased variance) and,
    when update_running is set, folds them into the running stats in place.
    Inference mode normalizes by the running stats. Returns (y, cache).
    """
    x = as_matrix(x)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    n, c = x.shape
    if n == 0:
        raise ShapeError("batchnorm needs at least one row")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm params expect {c} columns, got {gamma.shape}/{beta.shape}")
    if training:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        if update_running:
            running_mean[...] = momentum * running_mean + (1.0 - momentum) * mean
            running_var[...] = momentum * running_var + (1.0 - momentum) * var
    else:
        mean = np.asarray(running_mean, dtype=np.float64)
        var = np.asarray(running_var, dtype=np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    y = gamma * x_hat + beta
    cache = {"x_hat": x_hat, "inv_std": inv_std, "gamma": gamma, "training": training}
    return y, cache


def batchnorm_backward(cache, upstream):
    """Exact gradients for batchnorm_forward: returns (dx, dgamma, dbeta)."""
    upstream = as_matrix(upstream)
    x_hat = cache["x_hat"]
    if upstream.shape != x_hat.shape:
        raise ShapeError(f"batchnorm_backward shape mismatch: {upstream.shape} vs {x_hat.shape}")
    inv_std = cache["inv_std"]
    gamma = cache["gamma"]
    n = x_hat.shape[0]
    dgamma = (upstream * x_hat).sum(axis=0)
    dbeta = upstream.sum(axis=0)
    if cache["training"]:
        # batch statistics participate in the normalization
        dxhat = upstream * gamma
        dx = inv_std * (dxhat - dxhat.mean(axis=0) - x_hat * (dxhat * x_hat).mean(axis=0))
    else:
        dx = upstream * gamma * inv_std
    return dx, dgamma, dbeta


def softmax(x) -> np.ndarray:
    """Max-subtracted stable softmax of a 1-D vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError(f"softmax expects a non-empty 1-D vector, got shape {x.shape}")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_columns(x) -> np.ndarray:
    """Column-wise stable softmax of an (N, C) matrix."""
    x = as_matrix(x)
    if x.shape[0] == 0:
        raise ShapeError("softmax_columns needs at least one row")
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_vjp(probs, upstream) -> np.ndarray:
    """Backward of softmax: probs * (upstream - <probs, upstream>).

    Works along axis 0 for matrices (matching softmax_columns) and over the
    single axis for vectors.
    """
    probs = np.asarray(probs, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if probs.shape != upstream.shape:
        raise ShapeError(f"softmax_vjp shape mismatch: {probs.shape} vs {upstream.shape}")
    inner = (probs * upstream).sum(axis=0, keepdims=probs.ndim > 1)
    return probs * (upstream - inner)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

#: Denominator floor for relative errors; keeps fd roundoff on near-zero
#: coordinates from dominating the reported maximum.
REL_ERR_FLOOR = 1e-5


def grad_check(loss_fn, params, h: float = 1e-5, coords_per_tensor: int = 200, rng: RngStream | None = None) -> float:
    """Max relative error between analytic gradients and central differences.

    `loss_fn()` must run a full forward+backward: return the scalar loss and
    accumulate gradients into each ParamTensor.grad. It must be deterministic
    (frozen dropout masks, no running-stat updates); this is verified by
    evaluating it twice. Checks a random subsample of up to
    `coords_per_tensor` coordinates per tensor.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    tensors = list(params)
    if rng is None:
        rng = RngStream(0, "gradcheck")

    for p in tensors:
        p.zero_grad()
    base = float(loss_fn())
    analytic = {p.name: p.grad.copy() for p in tensors}
    for p in tensors:
        p.zero_grad()
    again = float(loss_fn())
    if again != base:
        raise GradCheckProtocolError(
            f"loss_fn is not deterministic: {base!r} vs {again!r}"
        )

    worst = 0.0
    for p in tensors:
        flat = p.value.reshape(-1)
        size = flat.size
        count = min(coords_per_tensor, size)
        idx = rng.substream(f"coords/{p.name}").choice(size, size=count, replace=False)
        a_flat = analytic[p.name].reshape(-1)
        for i in np.sort(idx):
            old = flat[i]
            flat[i] = old + h
            lp = float(loss_fn())
            flat[i] = old - h
            lm = float(loss_fn())
            flat[i] = old
            numeric = (lp - lm) / (2.0 * h)
            rel = abs(a_flat[i] - numeric) / max(abs(numeric), REL_ERR_FLOOR)
            if rel > worst:
                worst = rel
    for p in tensors:
        p.zero_grad()
    return worst
