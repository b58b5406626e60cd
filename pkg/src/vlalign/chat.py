"""Toy frozen decoder LM plus the trainable MLP projector used by the
chat configurations: visual features are projected into the decoder's
embedding space and act as a soft prefix."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    affine_layer_norm,
    init_block_params,
    linear,
    normal_param,
    ones_param,
    self_attention_block,
    zeros_param,
)
from .middleware import TextEncodingError
from .tensor import Tensor


@dataclass(frozen=True)
class ChatConfig:
    width: int
    depth: int
    heads: int
    vocab_size: int = 259
    max_seq_len: int = 96
    projector_hidden: int = 64
    bos_id: int = 256
    eos_id: int = 257
    pad_id: int = 258


def init_chat_params(cfg: ChatConfig, in_dim: int, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Decoder ('chat_lm.*', frozen in fine-tuning) and projector ('projector.*')."""
    w = cfg.width
    params: dict[str, Tensor] = {}
    params["chat_lm.tok_embed"] = normal_param(rng, (cfg.vocab_size, w), dtype=dtype)
    params["chat_lm.pos_embed"] = normal_param(rng, (cfg.max_seq_len, w), dtype=dtype)
    for i in range(cfg.depth):
        init_block_params(params, f"chat_lm.block{i}", w, 4 * w, cfg.depth, rng, dtype)
    params["chat_lm.final_ln.gamma"] = ones_param((w,), dtype)
    params["chat_lm.final_ln.beta"] = zeros_param((w,), dtype)
    params["chat_lm.head.weight"] = normal_param(rng, (w, cfg.vocab_size), dtype=dtype)
    params["chat_lm.head.bias"] = zeros_param((cfg.vocab_size,), dtype)
    params["projector.fc1.weight"] = normal_param(rng, (in_dim, cfg.projector_hidden), dtype=dtype)
    params["projector.fc1.bias"] = zeros_param((cfg.projector_hidden,), dtype)
    params["projector.fc2.weight"] = normal_param(rng, (cfg.projector_hidden, w), dtype=dtype)
    params["projector.fc2.bias"] = zeros_param((w,), dtype)
    return params


def project_features(feats: Tensor, params: dict) -> Tensor:
    """Two-layer MLP from visual feature space into the decoder width."""
    h = linear(feats, params["projector.fc1.weight"], params["projector.fc1.bias"])
    h = T.gelu(h)
    return linear(h, params["projector.fc2.weight"], params["projector.fc2.bias"])


def _pad(seqs: Sequence, pad_id: int, max_len: int):
    seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if lengths.max() > max_len:
        raise TextEncodingError(f"sequence length {lengths.max()} > max_seq_len {max_len}")
    ids = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


def _prefix_causal_mask(n_prefix: int, s: int, lengths: np.ndarray):
    total = n_prefix + s
    base = np.zeros((total, total), dtype=bool)
    base[:n_prefix, :n_prefix] = True
    base[n_prefix:, :n_prefix] = True
    base[n_prefix:, n_prefix:] = np.tril(np.ones((s, s), dtype=bool))
    valid_key = np.ones((len(lengths), total), dtype=bool)
    valid_key[:, n_prefix:] = np.arange(s)[None, :] < lengths[:, None]
    return base[None, None] & valid_key[:, None, None, :]


def _decode_hidden(prefix: Tensor, ids: np.ndarray, lengths: np.ndarray, params: dict, cfg: ChatConfig) -> Tensor:
    b, s = ids.shape
    tx = T.add(
        T.embedding(params["chat_lm.tok_embed"], ids),
        T.index_select(params["chat_lm.pos_embed"], 0, np.arange(s)),
    )
    x = T.concat([prefix, tx], axis=1)
    keep = _prefix_causal_mask(prefix.shape[1], s, lengths)
    for i in range(cfg.depth):
        x = self_attention_block(x, params, f"chat_lm.block{i}", cfg.heads, mask=keep)
    return affine_layer_norm(x, params["chat_lm.final_ln.gamma"], params["chat_lm.final_ln.beta"])


def pretrain_forward(caption_ids: Sequence, params: dict, cfg: ChatConfig, prefix: np.ndarray):
    """Causal LM over captions behind a soft-prompt prefix; the decoder is a
    stand-in for an off-the-shelf pretrained LLM and must tolerate (and
    exploit) prefix vectors before fine-tuning ever sees projector output."""
    ids, lengths = _pad(caption_ids, cfg.pad_id, cfg.max_seq_len)
    inputs = ids[:, :-1]
    targets = ids[:, 1:].copy()
    weights = (np.arange(inputs.shape[1])[None, :] < (lengths - 1)[:, None]).astype(np.float64)
    targets[weights == 0] = 0
    hidden = _decode_hidden(T.tensor(prefix), inputs, lengths - 1, params, cfg)
    text_hidden = T.slice_(hidden, (slice(None), slice(prefix.shape[1], None)))
    logits = linear(text_hidden, params["chat_lm.head.weight"], params["chat_lm.head.bias"])
    return logits, targets, weights


def sft_forward(prefix: Tensor, prompt_ids: Sequence, response_ids: Sequence, params: dict, cfg: ChatConfig):
    """Supervised fine-tuning pass: predict response tokens (and EOS) given
    the projected visual prefix and the prompt.

    prompt_ids rows start with BOS; response_ids rows end with EOS. Returns
    (logits, shifted targets, loss weights over response positions only).
    """
    full = [list(p) + list(r) for p, r in zip(prompt_ids, response_ids)]
    ids, lengths = _pad(full, cfg.pad_id, cfg.max_seq_len)
    prompt_lens = np.array([len(p) for p in prompt_ids], dtype=np.int64)
    inputs = ids[:, :-1]
    targets = ids[:, 1:].copy()
    pos = np.arange(inputs.shape[1])[None, :]
    weights = ((pos >= (prompt_lens - 1)[:, None]) & (pos < (lengths - 1)[:, None])).astype(np.float64)
    targets[weights == 0] = 0
    hidden = _decode_hidden(prefix, inputs, lengths - 1, params, cfg)
    text_hidden = T.slice_(hidden, (slice(None), slice(prefix.shape[1], None)))
    logits = linear(text_hidden, params["chat_lm.head.weight"], params["chat_lm.head.bias"])
    return logits, targets, weights


def generate(
    prefix: Tensor,
    prompt_ids: Sequence,
    params: dict,
    cfg: ChatConfig,
    max_len: int = 64,
) -> list:
    """Greedy decoding from the prefix + prompt until EOS or max_len."""
    if max_len < 1:
        raise TextEncodingError("max_len must be >= 1")
    seqs = [list(p) for p in prompt_ids]
    done = [False] * len(seqs)
    with T.no_grad():
        for _ in range(max_len):
            ids, lengths = _pad(seqs, cfg.pad_id, cfg.max_seq_len)
            hidden = _decode_hidden(prefix, ids, lengths, params, cfg)
            text_hidden = T.slice_(hidden, (slice(None), slice(prefix.shape[1], None)))
            logits = linear(text_hidden, params["chat_lm.head.weight"], params["chat_lm.head.bias"])
            for i, seq in enumerate(seqs):
                if done[i]:
                    continue
                nxt = int(np.argmax(logits.data[i, len(seq) - 1]))
                seq.append(nxt)
                if nxt == cfg.eos_id or len(seq) >= cfg.max_seq_len:
                    done[i] = True
            if all(done):
                break
    out = []
    for i, seq in enumerate(seqs):
        out.append(seq[len(prompt_ids[i]):])
    return out
