"""Shared transformer building blocks over the autodiff primitives."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = T.matmul(x, w)
    if b is not None:
        y = T.add(y, b)
    return y


def affine_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), gamma), beta)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[B, S, D] -> [B, h, S, D/h]."""
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, h, S, hd] -> [B, S, h*hd]."""
    b, h, s, hd = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * hd))


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention over already-projected q/k/v.

    mask, when given, is a boolean keep-mask broadcastable to
    [B, heads, S_q, S_k]; masked keys receive weight exactly 0.
    """
    head_dim = q.shape[-1] // num_heads
    qh = split_heads(q, num_heads)
    kh = split_heads(k, num_heads)
    vh = split_heads(v, num_heads)
    scores = T.scale(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    if mask is not None:
        scores = T.masked_fill(scores, mask)
    weights = T.softmax(scores)
    return merge_heads(T.matmul(weights, vh))


def self_attention_block(
    x: Tensor,
    params: dict,
    prefix: str,
    num_heads: int,
    mask=None,
    drop_path_rate: float = 0.0,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Pre-LN transformer block: self-attention + MLP, both with drop path."""
    h = affine_layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    qkv = linear(h, params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"])
    d = x.shape[-1]
    q = T.slice_(qkv, (Ellipsis, slice(0, d)))
    k = T.slice_(qkv, (Ellipsis, slice(d, 2 * d)))
    v = T.slice_(qkv, (Ellipsis, slice(2 * d, 3 * d)))
    a = attention(q, k, v, num_heads, mask=mask)
    a = linear(a, params[f"{prefix}.attn.out.weight"], params[f"{prefix}.attn.out.bias"])
    x = T.add(x, T.drop_path(a, drop_path_rate, rng=rng, train=train))

    h = affine_layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"])
    h = T.gelu(h)
    h = linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return T.add(x, T.drop_path(h, drop_path_rate, rng=rng, train=train))


def broadcast_rows(x: Tensor, batch: int) -> Tensor:
    """[N, D] -> [batch, N, D] by repetition; grads sum over the batch."""
    n, d = x.shape
    flat = T.index_select(x, 0, np.tile(np.arange(n), batch))
    return T.reshape(flat, (batch, n, d))


def causal_mask(size: int) -> np.ndarray:
    return np.tril(np.ones((size, size), dtype=bool))


# Parameter initialization -------------------------------------------------


def normal_param(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def init_block_params(
    params: dict,
    prefix: str,
    width: int,
    mlp_dim: int,
    depth: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> None:
    """Initialize one pre-LN block in place; residual outputs get 1/sqrt(2L) scaling."""
    resid_std = 0.02 / np.sqrt(2.0 * max(depth, 1))
    params[f"{prefix}.ln1.gamma"] = ones_param((width,), dtype)
    params[f"{prefix}.ln1.beta"] = zeros_param((width,), dtype)
    params[f"{prefix}.attn.qkv.weight"] = normal_param(rng, (width, 3 * width), dtype=dtype)
    params[f"{prefix}.attn.qkv.bias"] = zeros_param((3 * width,), dtype)
    params[f"{prefix}.attn.out.weight"] = normal_param(rng, (width, width), std=resid_std, dtype=dtype)
    params[f"{prefix}.attn.out.bias"] = zeros_param((width,), dtype)
    params[f"{prefix}.ln2.gamma"] = ones_param((width,), dtype)
    params[f"{prefix}.ln2.beta"] = zeros_param((width,), dtype)
    params[f"{prefix}.mlp.fc1.weight"] = normal_param(rng, (width, mlp_dim), dtype=dtype)
    params[f"{prefix}.mlp.fc1.bias"] = zeros_param((mlp_dim,), dtype)
    params[f"{prefix}.mlp.fc2.weight"] = normal_param(rng, (mlp_dim, width), std=resid_std, dtype=dtype)
    params[f"{prefix}.mlp.fc2.bias"] = zeros_param((width,), dtype)
