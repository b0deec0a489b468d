"""Parameterized layers with hand-written backward passes.

Every layer follows the same contract: ``forward(x, ctx)`` stores whatever the
backward pass needs inside the caller-supplied ``ctx`` dict (forward stays pure
when ``ctx`` is None), and ``backward(dy, ctx)`` returns d(loss)/d(input) while
accumulating parameter gradients into each Tensor's ``grad`` buffer.
``params()`` yields ``(name, Tensor)`` pairs for checkpointing and optimizers.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .numerics import (
    NEG_INF,
    Rng,
    Tensor,
    gelu,
    gelu_backward,
    softmax,
    softmax_backward,
)

INIT_SCALE = 0.02


def causal_mask(size: int) -> np.ndarray:
    """Additive mask: position t may attend to positions <= t."""
    return prefix_lm_mask(size, 0)


def prefix_lm_mask(size: int, prefix_len: int) -> np.ndarray:
    """Additive mask where the first ``prefix_len`` rows attend bidirectionally
    among themselves and the remaining rows attend to the prefix plus causally
    to each other.  Prefix rows never see suffix rows, which is what makes
    inference (no suffix present) agree with training exactly.
    """
    idx = np.arange(size)
    i, j = idx[:, None], idx[None, :]
    allowed = np.where(
        i < prefix_len,
        j < prefix_len,
        j <= i,
    )
    return np.where(allowed, 0.0, NEG_INF)


def sinusoid_positions(length: int, dim: int) -> np.ndarray:
    """Fixed sinusoidal position encoding, (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    half = np.arange(0, dim, 2, dtype=np.float64)
    freq = np.exp(-math.log(10000.0) * half / dim)
    angles = pos * freq[None, :]
    enc = np.zeros((length, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : enc[:, 1::2].shape[1]])
    return enc


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: Rng, bias: bool = True):
        self.w = Tensor(rng.normal(INIT_SCALE, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None

    def forward(self, x: np.ndarray, ctx: dict | None = None) -> np.ndarray:
        if ctx is not None:
            ctx["x"] = x
        y = x @ self.w.data
        if self.b is not None:
            y = y + self.b.data
        return y

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        x = ctx["x"]
        self.w.accumulate_grad(x.T @ dy)
        if self.b is not None:
            self.b.accumulate_grad(dy.sum(axis=0))
        return dy @ self.w.data.T

    def params(self) -> Iterator[tuple[str, Tensor]]:
        yield "w", self.w
        if self.b is not None:
            yield "b", self.b


class Embedding:
    def __init__(self, vocab_size: int, dim: int, rng: Rng):
        self.w = Tensor(rng.normal(INIT_SCALE, (vocab_size, dim)), requires_grad=True)

    def forward(self, ids: np.ndarray, ctx: dict | None = None) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ctx is not None:
            ctx["ids"] = ids
        return self.w.data[ids]

    def backward(self, dy: np.ndarray, ctx: dict) -> None:
        if self.w.requires_grad:
            g = np.zeros_like(self.w.data)
            np.add.at(g, ctx["ids"], dy)
            self.w.accumulate_grad(g)

    def params(self) -> Iterator[tuple[str, Tensor]]:
        yield "w", self.w


class LayerNorm:
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x: np.ndarray, ctx: dict | None = None) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        norm = (x - mean) * inv_std
        if ctx is not None:
            ctx["norm"] = norm
            ctx["inv_std"] = inv_std
        return norm * self.gain.data + self.bias.data

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        norm, inv_std = ctx["norm"], ctx["inv_std"]
        self.gain.accumulate_grad((dy * norm).sum(axis=0))
        self.bias.accumulate_grad(dy.sum(axis=0))
        dnorm = dy * self.gain.data
        # backprop through (x - mean) / std with var computed over the row
        return inv_std * (
            dnorm
            - dnorm.mean(axis=-1, keepdims=True)
            - norm * (dnorm * norm).mean(axis=-1, keepdims=True)
        )

    def params(self) -> Iterator[tuple[str, Tensor]]:
        yield "gain", self.gain
        yield "bias", self.bias


class LoraAdapter:
    """Low-rank additive branch: x -> (alpha/rank) * x A B.

    B starts at zero, so a fresh adapter leaves the base projection unchanged.
    """

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, rng: Rng):
        if rank >= min(d_in, d_out):
            raise ValueError(
                f"lora rank {rank} must be < min(dims) = {min(d_in, d_out)}"
            )
        if rank < 1:
            raise ValueError("lora rank must be >= 1")
        self.rank = rank
        self.alpha = float(alpha)
        self.a = Tensor(rng.normal(INIT_SCALE, (d_in, rank)), requires_grad=True)
        self.b = Tensor(np.zeros((rank, d_out)), requires_grad=True)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def forward(self, x: np.ndarray, ctx: dict | None = None) -> np.ndarray:
        xa = x @ self.a.data
        if ctx is not None:
            ctx["x"] = x
            ctx["xa"] = xa
        return self.scale * (xa @ self.b.data)

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        x, xa = ctx["x"], ctx["xa"]
        dxa = self.scale * (dy @ self.b.data.T)
        self.b.accumulate_grad(self.scale * (xa.T @ dy))
        self.a.accumulate_grad(x.T @ dxa)
        return dxa @ self.a.data.T

    def merged_delta(self) -> np.ndarray:
        return self.scale * (self.a.data @ self.b.data)

    def params(self) -> Iterator[tuple[str, Tensor]]:
        yield "a", self.a
        yield "b", self.b


def lora_apply(adapter: LoraAdapter, w, x) -> np.ndarray:
    """y = x W + (alpha/rank) x A B, the unmerged adapter path."""
    base = np.asarray(w.data if isinstance(w, Tensor) else w)
    xa = np.asarray(x.data if isinstance(x, Tensor) else x)
    return xa @ base + adapter.forward(xa)


class MultiHeadAttention:
    """Self-attention with an additive mask and optional LoRA on q/v."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        rng: Rng,
        lora_rank: int = 0,
        lora_alpha: float = 0.0,
    ):
        if d_model % n_heads != 0:
            raise ValueError(f"{n_heads} heads do not divide width {d_model}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Tensor(rng.normal(INIT_SCALE, (d_model, d_model)), requires_grad=True)
        self.wk = Tensor(rng.normal(INIT_SCALE, (d_model, d_model)), requires_grad=True)
        self.wv = Tensor(rng.normal(INIT_SCALE, (d_model, d_model)), requires_grad=True)
        self.wo = Tensor(rng.normal(INIT_SCALE, (d_model, d_model)), requires_grad=True)
        self.lora_q: LoraAdapter | None = None
        self.lora_v: LoraAdapter | None = None
        if lora_rank > 0:
            self.lora_q = LoraAdapter(d_model, d_model, lora_rank, lora_alpha, rng.child("lora_q"))
            self.lora_v = LoraAdapter(d_model, d_model, lora_rank, lora_alpha, rng.child("lora_v"))

    def _split(self, x: np.ndarray) -> np.ndarray:
        t = x.shape[0]
        return x.reshape(t, self.n_heads, self.d_head).transpose(1, 0, 2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        h, t, d = x.shape
        return x.transpose(1, 0, 2).reshape(t, h * d)

    def forward(self, x: np.ndarray, mask: np.ndarray | None, ctx: dict | None = None) -> np.ndarray:
        q = x @ self.wq.data
        k = x @ self.wk.data
        v = x @ self.wv.data
        lq_ctx = lv_ctx = None
        if self.lora_q is not None:
            lq_ctx, lv_ctx = {}, {}
            q = q + self.lora_q.forward(x, lq_ctx)
            v = v + self.lora_v.forward(x, lv_ctx)

        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(self.d_head)
        if mask is not None:
            scores = scores + mask[None, :, :]
        attn = softmax(scores, axis=-1)
        out_heads = attn @ vh
        merged = self._merge(out_heads)
        y = merged @ self.wo.data

        if ctx is not None:
            ctx.update(
                x=x, qh=qh, kh=kh, vh=vh, attn=attn, merged=merged,
                lq_ctx=lq_ctx, lv_ctx=lv_ctx,
            )
        return y

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        x, qh, kh, vh, attn = ctx["x"], ctx["qh"], ctx["kh"], ctx["vh"], ctx["attn"]
        self.wo.accumulate_grad(ctx["merged"].T @ dy)
        dmerged = dy @ self.wo.data.T
        dout_heads = self._split(dmerged)

        dattn = dout_heads @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ dout_heads
        dscores = softmax_backward(attn, dattn, axis=-1) / math.sqrt(self.d_head)
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 2, 1) @ qh

        dq, dk, dv = self._merge(dqh), self._merge(dkh), self._merge(dvh)
        self.wq.accumulate_grad(x.T @ dq)
        self.wk.accumulate_grad(x.T @ dk)
        self.wv.accumulate_grad(x.T @ dv)
        dx = dq @ self.wq.data.T + dk @ self.wk.data.T + dv @ self.wv.data.T
        if self.lora_q is not None:
            dx += self.lora_q.backward(dq, ctx["lq_ctx"])
            dx += self.lora_v.backward(dv, ctx["lv_ctx"])
        return dx

    def params(self) -> Iterator[tuple[str, Tensor]]:
        yield "wq", self.wq
        yield "wk", self.wk
        yield "wv", self.wv
        yield "wo", self.wo
        if self.lora_q is not None:
            for n, p in self.lora_q.params():
                yield f"lora_q.{n}", p
            for n, p in self.lora_v.params():
                yield f"lora_v.{n}", p

    def lora_params(self) -> Iterator[tuple[str, Tensor]]:
        if self.lora_q is not None:
            for n, p in self.lora_q.params():
                yield f"lora_q.{n}", p
            for n, p in self.lora_v.params():
                yield f"lora_v.{n}", p


class FeedForward:
    def __init__(self, d_model: int, d_hidden: int, rng: Rng):
        self.lin1 = Linear(d_model, d_hidden, rng.child("lin1"))
        self.lin2 = Linear(d_hidden, d_model, rng.child("lin2"))

    def forward(self, x: np.ndarray, ctx: dict | None = None) -> np.ndarray:
        c1 = {} if ctx is not None else None
        h = self.lin1.forward(x, c1)
        a = gelu(h)
        c2 = {} if ctx is not None else None
        y = self.lin2.forward(a, c2)
        if ctx is not None:
            ctx.update(c1=c1, c2=c2, h=h)
        return y

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        da = self.lin2.backward(dy, ctx["c2"])
        dh = gelu_backward(ctx["h"], da)
        return self.lin1.backward(dh, ctx["c1"])

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.lin1.params():
            yield f"lin1.{n}", p
        for n, p in self.lin2.params():
            yield f"lin2.{n}", p


class TransformerBlock:
    """Pre-norm block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        d_ff: int,
        rng: Rng,
        lora_rank: int = 0,
        lora_alpha: float = 0.0,
    ):
        self.ln1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(
            d_model, n_heads, rng.child("attn"), lora_rank=lora_rank, lora_alpha=lora_alpha
        )
        self.ln2 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, rng.child("ffn"))

    def forward(self, x: np.ndarray, mask: np.ndarray | None, ctx: dict | None = None) -> np.ndarray:
        if ctx is None:
            a = x + self.attn.forward(self.ln1.forward(x), mask)
            return a + self.ffn.forward(self.ln2.forward(a))
        c_ln1, c_attn, c_ln2, c_ffn = {}, {}, {}, {}
        a = x + self.attn.forward(self.ln1.forward(x, c_ln1), mask, c_attn)
        y = a + self.ffn.forward(self.ln2.forward(a, c_ln2), c_ffn)
        ctx.update(c_ln1=c_ln1, c_attn=c_attn, c_ln2=c_ln2, c_ffn=c_ffn)
        return y

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        da = dy + self.ln2.backward(self.ffn.backward(dy, ctx["c_ffn"]), ctx["c_ln2"])
        return da + self.ln1.backward(self.attn.backward(da, ctx["c_attn"]), ctx["c_ln1"])

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.ln1.params():
            yield f"ln1.{n}", p
        for n, p in self.attn.params():
            yield f"attn.{n}", p
        for n, p in self.ln2.params():
            yield f"ln2.{n}", p
        for n, p in self.ffn.params():
            yield f"ffn.{n}", p

    def lora_params(self) -> Iterator[tuple[str, Tensor]]:
        for n, p in self.attn.lora_params():
            yield f"attn.{n}", p


class TransformerStack:
    """A stack of blocks with a final layer norm."""

    def __init__(
        self,
        n_layers: int,
        d_model: int,
        n_heads: int,
        d_ff: int,
        rng: Rng,
        lora_rank: int = 0,
        lora_alpha: float = 0.0,
    ):
        self.blocks = [
            TransformerBlock(
                d_model, n_heads, d_ff, rng.child(f"block{i}"),
                lora_rank=lora_rank, lora_alpha=lora_alpha,
            )
            for i in range(n_layers)
        ]
        # an empty stack is the identity map, so it carries no final norm
        self.ln_f = LayerNorm(d_model) if n_layers > 0 else None

    def forward(self, x: np.ndarray, mask: np.ndarray | None, ctx: dict | None = None) -> np.ndarray:
        if self.ln_f is None:
            if ctx is not None:
                ctx.update(blocks=[], c_ln=None)
            return x
        if ctx is None:
            for block in self.blocks:
                x = block.forward(x, mask)
            return self.ln_f.forward(x)
        block_ctxs = []
        for block in self.blocks:
            c = {}
            x = block.forward(x, mask, c)
            block_ctxs.append(c)
        c_ln = {}
        y = self.ln_f.forward(x, c_ln)
        ctx.update(blocks=block_ctxs, c_ln=c_ln)
        return y

    def backward(self, dy: np.ndarray, ctx: dict) -> np.ndarray:
        if self.ln_f is None:
            return dy
        dx = self.ln_f.backward(dy, ctx["c_ln"])
        for block, c in zip(reversed(self.blocks), reversed(ctx["blocks"])):
            dx = block.backward(dx, c)
        return dx

    def params(self) -> Iterator[tuple[str, Tensor]]:
        for i, block in enumerate(self.blocks):
            for n, p in block.params():
                yield f"blocks.{i}.{n}", p
        if self.ln_f is not None:
            for n, p in self.ln_f.params():
                yield f"ln_f.{n}", p

    def lora_params(self) -> Iterator[tuple[str, Tensor]]:
        for i, block in enumerate(self.blocks):
            for n, p in block.lora_params():
                yield f"blocks.{i}.{n}", p
