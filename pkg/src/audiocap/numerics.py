"""Dense tensor math shared by every model in the package.

Everything here is plain numpy under the hood.  ``Tensor`` is a thin wrapper
that carries a gradient buffer; reverse-mode gradients are written by hand per
layer (see :mod:`audiocap.layers`) rather than through a general autodiff tape,
because the layer vocabulary is small and fixed and we want each backward pass
to be checkable in isolation.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

GELU_TANH_COEFF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
NEG_INF = -1e30  # additive mask value; large enough to zero out softmax weights exactly after exp underflow


class Tensor:
    """A named dense array with an optional gradient buffer.

    ``data`` is always row-major (C order).  Tests run everything in float64;
    training loops may choose float32.  ``grad`` is lazily allocated on first
    accumulation and always matches ``data`` in shape.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Rng:
    """Seeded counter-based random stream (Philox) with deterministic children.

    The same seed yields a bit-identical stream on every platform.  ``child``
    derives an independent stream from a string label, so each consumer of
    randomness (init, batching, masking, sampling) can be reseeded in
    isolation without perturbing the others.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = _key
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str) -> "Rng":
        # stable label -> spawn key; independent of call order
        h = 0
        for ch in label:
            h = (h * 1000003 + ord(ch)) % (2**31)
        return Rng(self.seed, self._key + (h,))

    def normal(self, scale: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self) -> float:
        return float(self._gen.random())


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def softmax(x, axis: int = -1) -> np.ndarray:
    """Stable softmax along ``axis`` (max-subtraction before exponentiation)."""
    a = _as_array(x)
    if not np.all(np.isfinite(a)):
        raise ValueError("softmax: non-finite input")
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    a = _as_array(x)
    if not np.all(np.isfinite(a)):
        raise ValueError("log_softmax: non-finite input")
    shifted = a - np.max(a, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_backward(probs: np.ndarray, dprobs: np.ndarray, axis: int = -1) -> np.ndarray:
    """Jacobian-vector product of softmax: p * (dp - sum(dp * p))."""
    inner = np.sum(dprobs * probs, axis=axis, keepdims=True)
    return probs * (dprobs - inner)


def gelu(x) -> np.ndarray:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = _as_array(x)
    inner = SQRT_2_OVER_PI * (a + GELU_TANH_COEFF * a**3)
    return 0.5 * a * (1.0 + np.tanh(inner))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    inner = SQRT_2_OVER_PI * (x + GELU_TANH_COEFF * x**3)
    t = np.tanh(inner)
    dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_TANH_COEFF * x**2)
    dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
    return dy * dx


def layer_norm(x, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    a = _as_array(x)
    if a.shape[-1] < 2:
        raise ValueError("layer_norm: last-axis length must be >= 2")
    mean = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    norm = (a - mean) / np.sqrt(var + eps)
    return norm * _as_array(gain) + _as_array(bias)


def scaled_dot_attention(q, k, v, causal_mask: bool = False) -> np.ndarray:
    """Single-head attention: softmax(q k^T / sqrt(d_k)) v.

    With ``causal_mask`` the score of every position j > t is pushed to -inf
    before the softmax, so row t is a convex combination of v rows <= t only.
    """
    qa, ka, va = _as_array(q), _as_array(k), _as_array(v)
    if qa.shape[-1] != ka.shape[-1]:
        raise ValueError(
            f"scaled_dot_attention: key dim mismatch {qa.shape[-1]} vs {ka.shape[-1]}"
        )
    if ka.shape[0] != va.shape[0]:
        raise ValueError(
            f"scaled_dot_attention: {ka.shape[0]} keys vs {va.shape[0]} value rows"
        )
    scores = qa @ ka.T / math.sqrt(qa.shape[-1])
    if causal_mask:
        t_q, t_k = scores.shape
        mask = np.triu(np.ones((t_q, t_k)), k=1) * NEG_INF
        scores = scores + mask
    return softmax(scores, axis=-1) @ va


def cross_entropy_from_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over rows, plus d(loss)/d(logits).

    ``logits`` is (T, V); ``targets`` is (T,) integer ids.  The gradient is
    (softmax - onehot) / T, the closed form for softmax composed with NLL.
    """
    t = logits.shape[0]
    logp = log_softmax(logits, axis=-1)
    loss = -float(np.mean(logp[np.arange(t), targets]))
    dlogits = softmax(logits, axis=-1)
    dlogits[np.arange(t), targets] -= 1.0
    dlogits /= t
    return loss, dlogits


def finite_difference_check(
    f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5
) -> float:
    """Max relative error between the analytic gradient of ``f`` and central differences.

    ``f`` must run a forward and backward pass, leaving d(f)/d(x) in ``x.grad``.
    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    x.zero_grad()
    f(x)
    if x.grad is None:
        raise ValueError("finite_difference_check: f did not populate x.grad")
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        x.zero_grad()
        fp = f(x)
        flat[i] = orig - h
        x.zero_grad()
        fm = f(x)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    x.zero_grad()

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
