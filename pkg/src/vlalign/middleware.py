"""Language middleware: a decoder-style text transformer augmented with
learnable queries and cross-attention layers inserted every few blocks.

Parameter names split into two disjoint groups:
  backbone  -- 'lm.*', 'text_proj.*', 'pool_c.*', 'logit_scale'
               (trained in the contrastive stage, frozen afterwards)
  new       -- 'queries', 'xattn*', 'img_proj.*', 'pool_g.*', 'itm_head.*'
               (randomly initialized for and trained in the generative stage)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    affine_layer_norm,
    attention,
    broadcast_rows,
    init_block_params,
    linear,
    normal_param,
    zeros_param,
)
from .tensor import InvalidAttributeError, ShapeMismatchError, Tensor

NEW_PARAM_PREFIXES = ("queries", "xattn", "img_proj", "pool_g", "itm_head")

LOGIT_SCALE_INIT = float(np.log(1.0 / 0.07))
LOGIT_SCALE_MAX = 100.0

# queries start at the scale of the soft-prompt noise used in LM
# pretraining; with zero-initialized cross-attention outputs, the frozen
# backbone sees an in-distribution prefix at generative-stage start
QUERY_INIT_STD = 0.05


class TextEncodingError(ValueError):
    """Raised for malformed token sequences (EOS count, length)."""


@dataclass(frozen=True)
class MiddlewareConfig:
    lm_width: int
    lm_depth: int
    lm_heads: int
    vision_width: int
    vocab_size: int = 259
    max_seq_len: int = 96
    num_queries: int = 8
    cross_attn_stride: int = 2
    itm_head: bool = True
    embed_dim: int = 64
    pool_heads: int = 4
    bos_id: int = 256
    eos_id: int = 257
    pad_id: int = 258

    def __post_init__(self):
        if self.lm_width % self.lm_heads != 0:
            raise InvalidAttributeError(
                f"lm_width {self.lm_width} not divisible by lm_heads {self.lm_heads}"
            )
        if self.num_queries < 1:
            raise InvalidAttributeError("num_queries must be >= 1")
        if not 1 <= self.cross_attn_stride <= self.lm_depth:
            raise InvalidAttributeError(
                f"cross_attn_stride must be in [1, {self.lm_depth}], got {self.cross_attn_stride}"
            )

    @property
    def cross_attn_blocks(self) -> tuple:
        return tuple(i for i in range(self.lm_depth) if i % self.cross_attn_stride == 0)


def init_middleware_params(cfg: MiddlewareConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    w = cfg.lm_width
    params: dict[str, Tensor] = {}
    # backbone
    params["lm.tok_embed"] = normal_param(rng, (cfg.vocab_size, w), dtype=dtype)
    params["lm.pos_embed"] = normal_param(rng, (cfg.max_seq_len, w), dtype=dtype)
    for i in range(cfg.lm_depth):
        init_block_params(params, f"lm.block{i}", w, 4 * w, cfg.lm_depth, rng, dtype)
    params["lm.final_ln.gamma"] = Tensor(np.ones(w, dtype=dtype), requires_grad=True)
    params["lm.final_ln.beta"] = zeros_param((w,), dtype)
    params["lm.head.weight"] = normal_param(rng, (w, cfg.vocab_size), dtype=dtype)
    params["lm.head.bias"] = zeros_param((cfg.vocab_size,), dtype)
    params["text_proj.weight"] = normal_param(rng, (w, cfg.embed_dim), dtype=dtype)
    _init_pool(params, "pool_c", cfg.vision_width, cfg.embed_dim, rng, dtype)
    params["logit_scale"] = Tensor(np.asarray(LOGIT_SCALE_INIT, dtype=dtype), requires_grad=True)
    # newly added
    params["queries"] = normal_param(rng, (cfg.num_queries, w), std=QUERY_INIT_STD, dtype=dtype)
    params["img_proj.weight"] = normal_param(rng, (cfg.vision_width, w), dtype=dtype)
    params["img_proj.bias"] = zeros_param((w,), dtype)
    for i in cfg.cross_attn_blocks:
        p = f"xattn{i}"
        params[f"{p}.ln_q.gamma"] = Tensor(np.ones(w, dtype=dtype), requires_grad=True)
        params[f"{p}.ln_q.beta"] = zeros_param((w,), dtype)
        for name in ("q", "k", "v"):
            params[f"{p}.{name}.weight"] = normal_param(rng, (w, w), dtype=dtype)
        # zero output: cross-attention fades in from an identity branch
        params[f"{p}.out.weight"] = zeros_param((w, w), dtype)
        params[f"{p}.out.bias"] = zeros_param((w,), dtype)
    _init_pool(params, "pool_g", w, cfg.embed_dim, rng, dtype)
    if cfg.itm_head:
        params["itm_head.weight"] = zeros_param((w, 1), dtype)
        params["itm_head.bias"] = zeros_param((1,), dtype)
    return params


def _init_pool(params: dict, prefix: str, d_in: int, d_out: int, rng, dtype) -> None:
    params[f"{prefix}.probe"] = normal_param(rng, (1, d_in), dtype=dtype)
    for name in ("q", "k", "v"):
        params[f"{prefix}.{name}.weight"] = normal_param(rng, (d_in, d_in), dtype=dtype)
    params[f"{prefix}.out.weight"] = normal_param(rng, (d_in, d_out), dtype=dtype)


def newly_added_names(params: dict) -> set:
    return {n for n in params if n.startswith(NEW_PARAM_PREFIXES)}


def backbone_names(params: dict) -> set:
    return {n for n in params if not n.startswith(NEW_PARAM_PREFIXES)}


# ---------------------------------------------------------------------------
# Text path
# ---------------------------------------------------------------------------


def _pad_batch(token_ids, cfg: MiddlewareConfig, require_eos: bool = True):
    """Normalize to a padded [B, S] id array plus lengths and EOS positions."""
    if isinstance(token_ids, np.ndarray) and token_ids.ndim == 1:
        seqs = [token_ids]
    elif isinstance(token_ids, (list, tuple)) and token_ids and np.isscalar(token_ids[0]):
        seqs = [np.asarray(token_ids)]
    else:
        seqs = [np.asarray(s) for s in token_ids]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    eos_pos = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        if len(s) > cfg.max_seq_len:
            raise TextEncodingError(f"sequence {i} has length {len(s)} > max_seq_len {cfg.max_seq_len}")
        if not require_eos:
            continue
        hits = np.flatnonzero(s == cfg.eos_id)
        if len(hits) == 0:
            raise TextEncodingError(f"sequence {i} has no EOS token")
        if len(hits) > 1:
            raise TextEncodingError(f"sequence {i} has {len(hits)} EOS tokens, expected exactly one")
        eos_pos[i] = hits[0]
    s_max = int(lengths.max())
    ids = np.full((len(seqs), s_max), cfg.pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths, eos_pos


@dataclass
class TextEncoding:
    hidden: Tensor     # [B, S, lm_width] after the final norm
    t_f: Tensor        # [B, embed_dim], L2-normalized EOS feature
    eos_positions: np.ndarray


def encode_text(token_ids, params: dict, cfg: MiddlewareConfig) -> TextEncoding:
    """Causal transformer over text; T_f is the projected EOS-position state."""
    ids, lengths, eos_pos = _pad_batch(token_ids, cfg)
    b, s = ids.shape
    x = T.embedding(params["lm.tok_embed"], ids)
    pos = T.index_select(params["lm.pos_embed"], 0, np.arange(s))
    x = T.add(x, pos)
    # causal mask restricted to real (non-pad) keys
    keep = np.tril(np.ones((s, s), dtype=bool))[None, None] & (
        np.arange(s)[None, :] < lengths[:, None]
    )[:, None, None, :]
    for i in range(cfg.lm_depth):
        x = _lm_block(x, params, cfg, i, keep)
    hidden = affine_layer_norm(x, params["lm.final_ln.gamma"], params["lm.final_ln.beta"])
    eos_state = T.reshape(T.gather_rows(hidden, eos_pos[:, None]), (b, cfg.lm_width))
    t_f = T.l2_normalize(T.matmul(eos_state, params["text_proj.weight"]))
    return TextEncoding(hidden=hidden, t_f=t_f, eos_positions=eos_pos)


def _lm_block(
    x: Tensor,
    params: dict,
    cfg: MiddlewareConfig,
    i: int,
    keep_mask,
    image_tokens: Optional[Tensor] = None,
    num_query_rows: int = 0,
) -> Tensor:
    """One pre-LN block; when image tokens are given and block i carries a
    cross-attention layer, query rows cross-attend to them between the
    self-attention and MLP sublayers."""
    prefix = f"lm.block{i}"
    h = affine_layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    qkv = linear(h, params[f"{prefix}.attn.qkv.weight"], params[f"{prefix}.attn.qkv.bias"])
    d = cfg.lm_width
    q = T.slice_(qkv, (Ellipsis, slice(0, d)))
    k = T.slice_(qkv, (Ellipsis, slice(d, 2 * d)))
    v = T.slice_(qkv, (Ellipsis, slice(2 * d, 3 * d)))
    a = attention(q, k, v, cfg.lm_heads, mask=keep_mask)
    a = linear(a, params[f"{prefix}.attn.out.weight"], params[f"{prefix}.attn.out.bias"])
    x = T.add(x, a)

    if image_tokens is not None and i in cfg.cross_attn_blocks:
        xp = f"xattn{i}"
        xq = T.slice_(x, (slice(None), slice(0, num_query_rows)))
        hq = affine_layer_norm(xq, params[f"{xp}.ln_q.gamma"], params[f"{xp}.ln_q.beta"])
        cq = T.matmul(hq, params[f"{xp}.q.weight"])
        ck = T.matmul(image_tokens, params[f"{xp}.k.weight"])
        cv = T.matmul(image_tokens, params[f"{xp}.v.weight"])
        c = attention(cq, ck, cv, cfg.lm_heads)
        c = linear(c, params[f"{xp}.out.weight"], params[f"{xp}.out.bias"])
        xq = T.add(xq, c)
        if x.shape[1] > num_query_rows:
            rest = T.slice_(x, (slice(None), slice(num_query_rows, None)))
            x = T.concat([xq, rest], axis=1)
        else:
            x = xq

    h = affine_layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"])
    h = T.gelu(h)
    h = linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return T.add(x, h)


# ---------------------------------------------------------------------------
# Query path
# ---------------------------------------------------------------------------


def _lift_image_tokens(image_tokens: Tensor) -> tuple:
    if image_tokens.ndim == 2:
        return T.reshape(image_tokens, (1,) + image_tokens.shape), True
    if image_tokens.ndim != 3:
        raise ShapeMismatchError(f"image tokens must be [T, D] or [B, T, D], got {image_tokens.shape}")
    return image_tokens, False


def _project_image(image_tokens: Tensor, params: dict) -> Tensor:
    if image_tokens.shape[1] == 0:
        raise InvalidAttributeError("empty image token set")
    proj = linear(image_tokens, params["img_proj.weight"], params["img_proj.bias"])
    return T.layer_norm(proj)


def _joint_mask(cfg: MiddlewareConfig, k: int, lengths: Optional[np.ndarray], text_mode: str):
    """Boolean keep-mask over the concatenated [queries, text] sequence.

    text_mode 'bidirectional': queries and text fully attend to each other.
    text_mode 'causal': queries see only queries; text sees queries plus a
    causal window over itself (text is generated, queries are the prefix).
    """
    if lengths is None:
        return np.ones((k, k), dtype=bool)
    s = int(lengths.max())
    total = k + s
    base = np.zeros((total, total), dtype=bool)
    base[:k, :k] = True
    if text_mode == "bidirectional":
        base[:k, k:] = True
        base[k:, :k] = True
        base[k:, k:] = True
    elif text_mode == "causal":
        base[k:, :k] = True
        base[k:, k:] = np.tril(np.ones((s, s), dtype=bool))
    else:
        raise InvalidAttributeError(f"unknown text mode {text_mode!r}")
    valid_key = np.ones((len(lengths), total), dtype=bool)
    valid_key[:, k:] = np.arange(s)[None, :] < lengths[:, None]
    return base[None, None] & valid_key[:, None, None, :]


def _run_joint(
    image_tokens: Tensor,
    params: dict,
    cfg: MiddlewareConfig,
    text_ids: Optional[np.ndarray] = None,
    text_lengths: Optional[np.ndarray] = None,
    text_mode: str = "bidirectional",
):
    img, _ = _lift_image_tokens(image_tokens)
    b = img.shape[0]
    proj = _project_image(img, params)
    k = cfg.num_queries
    x = broadcast_rows(params["queries"], b)
    if text_ids is not None:
        tx = T.embedding(params["lm.tok_embed"], text_ids)
        pos = T.index_select(params["lm.pos_embed"], 0, np.arange(text_ids.shape[1]))
        x = T.concat([x, T.add(tx, pos)], axis=1)
    keep = _joint_mask(cfg, k, text_lengths, text_mode)
    for i in range(cfg.lm_depth):
        x = _lm_block(x, params, cfg, i, keep, image_tokens=proj, num_query_rows=k)
    return affine_layer_norm(x, params["lm.final_ln.gamma"], params["lm.final_ln.beta"])


def cross_encode_queries(
    image_tokens: Tensor,
    params: dict,
    cfg: MiddlewareConfig,
    text_ids=None,
) -> Tensor:
    """Query features [B, K, lm_width] (or [K, lm_width] for a single image).

    Queries attend bidirectionally among themselves and cross-attend to the
    projected image tokens in every stride-th block. With text_ids (matching
    mode) queries and text additionally attend to each other.
    """
    img, single = _lift_image_tokens(image_tokens)
    if text_ids is not None:
        ids, lengths, _ = _pad_batch(text_ids, cfg)
        hidden = _run_joint(img, params, cfg, ids, lengths, "bidirectional")
    else:
        hidden = _run_joint(img, params, cfg)
    q = T.slice_(hidden, (slice(None), slice(0, cfg.num_queries)))
    if single:
        q = T.reshape(q, q.shape[1:])
    return q


def generative_forward(
    image_tokens: Tensor,
    caption_ids,
    params: dict,
    cfg: MiddlewareConfig,
):
    """Image-grounded next-token prediction.

    Queries act as a non-predicted prefix; caption tokens attend causally to
    themselves and fully to the queries. Returns (logits over the input
    positions, shifted targets, loss weights that select real caption
    positions only).
    """
    ids, lengths, _ = _pad_batch(caption_ids, cfg)
    if ids.shape[1] < 2:
        raise TextEncodingError("caption must contain at least BOS and EOS")
    inputs = ids[:, :-1]
    targets = ids[:, 1:].copy()
    weights = (np.arange(inputs.shape[1])[None, :] < (lengths - 1)[:, None]).astype(np.float64)
    targets[weights == 0] = 0  # ignored positions; weight 0 in the loss
    in_lengths = lengths - 1
    hidden = _run_joint(image_tokens, params, cfg, inputs, in_lengths, "causal")
    text_hidden = T.slice_(hidden, (slice(None), slice(cfg.num_queries, None)))
    logits = linear(text_hidden, params["lm.head.weight"], params["lm.head.bias"])
    return logits, targets, weights


def prefix_lm_logits(image_tokens: Tensor, partial_ids, params: dict, cfg: MiddlewareConfig) -> Tensor:
    """Next-token logits over partial captions (no EOS requirement).

    Used by autoregressive decoding: the logits for continuing sequence i
    sit at position len(partial_ids[i]) - 1.
    """
    ids, lengths, _ = _pad_batch(partial_ids, cfg, require_eos=False)
    hidden = _run_joint(image_tokens, params, cfg, ids, lengths, "causal")
    text_hidden = T.slice_(hidden, (slice(None), slice(cfg.num_queries, None)))
    return linear(text_hidden, params["lm.head.weight"], params["lm.head.bias"])


def lm_forward(caption_ids, params: dict, cfg: MiddlewareConfig, prefix=None):
    """Causal language modeling over captions (no image conditioning).

    Used to pre-train the backbone as the stand-in for starting from
    pre-trained language model weights. `prefix`, when given, is a
    [B, K, lm_width] array of soft-prompt vectors prepended ahead of the
    text with the same attention geometry the queries use later, so the
    frozen backbone is already in-distribution when the generative stage
    bolts real queries on.
    """
    ids, lengths, _ = _pad_batch(caption_ids, cfg)
    if ids.shape[1] < 2:
        raise TextEncodingError("caption must contain at least BOS and EOS")
    inputs = ids[:, :-1]
    targets = ids[:, 1:].copy()
    weights = (np.arange(inputs.shape[1])[None, :] < (lengths - 1)[:, None]).astype(np.float64)
    targets[weights == 0] = 0
    b, s = inputs.shape
    x = T.add(
        T.embedding(params["lm.tok_embed"], inputs),
        T.index_select(params["lm.pos_embed"], 0, np.arange(s)),
    )
    k = 0
    if prefix is not None:
        k = prefix.shape[1]
        x = T.concat([T.tensor(prefix), x], axis=1)
    keep = _joint_mask(cfg, k, lengths - 1, "causal") if k else (
        np.tril(np.ones((s, s), dtype=bool))[None, None]
        & (np.arange(s)[None, :] < (lengths - 1)[:, None])[:, None, None, :]
    )
    for i in range(cfg.lm_depth):
        x = _lm_block(x, params, cfg, i, keep)
    hidden = affine_layer_norm(x, params["lm.final_ln.gamma"], params["lm.final_ln.beta"])
    if k:
        hidden = T.slice_(hidden, (slice(None), slice(k, None)))
    logits = linear(hidden, params["lm.head.weight"], params["lm.head.bias"])
    return logits, targets, weights


# ---------------------------------------------------------------------------
# Attention pooling
# ---------------------------------------------------------------------------


def attention_pool(features: Tensor, params: dict, prefix: str, num_heads: int) -> Tensor:
    """A single learnable probe attends over N features; the projected,
    L2-normalized result is the global feature."""
    single = features.ndim == 2
    x = T.reshape(features, (1,) + features.shape) if single else features
    if x.ndim != 3:
        raise ShapeMismatchError(f"attention_pool: expected [N, D] or [B, N, D], got {features.shape}")
    b, n, d = x.shape
    if n == 0:
        raise InvalidAttributeError("attention_pool: empty feature set")
    probe = broadcast_rows(params[f"{prefix}.probe"], b)
    q = T.matmul(probe, params[f"{prefix}.q.weight"])
    k = T.matmul(x, params[f"{prefix}.k.weight"])
    v = T.matmul(x, params[f"{prefix}.v.weight"])
    pooled = attention(q, k, v, num_heads)
    out = T.l2_normalize(T.matmul(T.reshape(pooled, (b, d)), params[f"{prefix}.out.weight"]))
    if single:
        out = T.reshape(out, (out.shape[-1],))
    return out


def itm_logits(query_feats: Tensor, params: dict) -> Tensor:
    """Mean-over-queries matching logit, [B]."""
    single = query_feats.ndim == 2
    x = T.reshape(query_feats, (1,) + query_feats.shape) if single else query_feats
    per_query = linear(x, params["itm_head.weight"], params["itm_head.bias"])
    z = T.mean(T.reshape(per_query, per_query.shape[:2]), axis=1)
    return z
