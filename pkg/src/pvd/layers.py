"""Transformer building blocks on top of the gradient engine.

Layers are plain functions that look their weights up in a ParamStore by
name prefix; ``init_*`` registers the weights.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InvalidArgument
from .params import ParamStore

MASK_FILL = -1e9


def init_linear(store: ParamStore, name: str, din: int, dout: int, bias: bool = True,
                zero: bool = False, bias_value: float = 0.0) -> None:
    """Uniform fan-in init (or all zeros)."""
    if zero:
        store.zeros(f"{name}.w", (din, dout))
    else:
        store.uniform(f"{name}.w", (din, dout), 1.0 / math.sqrt(din))
    if bias:
        store.add(f"{name}.b", np.full(dout, bias_value))


def linear(store: ParamStore, name: str, x: Tensor) -> Tensor:
    y = x @ store[f"{name}.w"]
    b = f"{name}.b"
    return y + store[b] if b in store else y


def init_mlp(store: ParamStore, name: str, d: int, hidden: int) -> None:
    init_linear(store, f"{name}.fc1", d, hidden)
    init_linear(store, f"{name}.fc2", hidden, d)


def mlp(store: ParamStore, name: str, x: Tensor) -> Tensor:
    return linear(store, f"{name}.fc2", ag.gelu(linear(store, f"{name}.fc1", x)))


def init_attention(store: ParamStore, name: str, d: int, n_heads: int) -> None:
    if d % n_heads:
        raise InvalidArgument(f"model width {d} not divisible by {n_heads} heads")
    init_linear(store, f"{name}.q", d, d)
    init_linear(store, f"{name}.k", d, d)
    init_linear(store, f"{name}.v", d, d)
    init_linear(store, f"{name}.o", d, d)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def attention_bias(key_mask: np.ndarray | None, n_query: int, causal: bool, dtype) -> np.ndarray | None:
    """Additive score bias of shape ``(B or 1, 1, Lq, Lk)`` from a key mask and/or causality."""
    bias = None
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        bias = np.where(km, 0.0, MASK_FILL)[:, None, None, :].astype(dtype)
    if causal:
        tri = np.triu(np.full((n_query, n_query), MASK_FILL, dtype=dtype), k=1)[None, None]
        bias = tri if bias is None else bias + tri
    return bias


def attention(store: ParamStore, name: str, x: Tensor, context: Tensor, n_heads: int,
              key_mask: np.ndarray | None = None, causal: bool = False, counter: dict | None = None) -> Tensor:
    """Multi-head scaled dot-product attention of ``x`` (B, Lq, d) over ``context`` (B, Lk, d).

    ``key_mask`` (B, Lk) marks valid keys. ``counter`` accumulates the number of
    query-key score evaluations under the key ``"attn"``.
    """
    b, lq, d = x.shape
    lk = context.shape[1]
    dh = d // n_heads
    q = _split_heads(linear(store, f"{name}.q", x), n_heads)
    k = _split_heads(linear(store, f"{name}.k", context), n_heads)
    v = _split_heads(linear(store, f"{name}.v", context), n_heads)
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    bias = attention_bias(key_mask, lq, causal, x.dtype)
    if bias is not None:
        scores = scores + Tensor(bias)
    if counter is not None:
        counter["attn"] = counter.get("attn", 0) + b * n_heads * lq * lk
    out = ag.softmax(scores) @ v
    out = out.transpose(0, 2, 1, 3).reshape(b, lq, d)
    return linear(store, f"{name}.o", out)


def sinusoid(values: np.ndarray, n_freq: int, base: float = 10000.0, scale: float = 1.0) -> np.ndarray:
    """``[sin(w_k v), cos(w_k v)]`` with ``w_k = scale * base**(-k / n_freq)``; appends a trailing axis of 2*n_freq."""
    v = np.asarray(values, dtype=np.float64)[..., None]
    w = scale * base ** (-np.arange(n_freq) / n_freq)
    return np.concatenate([np.sin(v * w), np.cos(v * w)], axis=-1)
