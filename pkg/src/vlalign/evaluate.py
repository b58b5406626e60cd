"""Evaluation harness: the contrastive inference modes, retrieval recall,
prompt-based zero-shot classification, linear probing on frozen features,
caption decoding, and frame-averaged video embeddings."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import EOS_ID, detokenize, tokenize
from .middleware import attention_pool, cross_encode_queries, encode_text, prefix_lm_logits
from .model import ModelAssembly
from .optim import sgd_momentum_step
from .tensor import Tensor
from .vit import encode as vit_encode

INFERENCE_MODES = ("C", "G", "chat-plain", "chat-full")


class EvalError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    ids: list
    vectors: np.ndarray  # [N, E], rows L2-normalized
    modality: str

    def __post_init__(self):
        if len(self.ids) != len(set(self.ids)):
            raise EvalError("embedding ids must be unique")
        if self.vectors.ndim != 2 or len(self.ids) != self.vectors.shape[0]:
            raise EvalError(
                f"vectors shape {self.vectors.shape} does not match {len(self.ids)} ids"
            )
        norms = np.linalg.norm(self.vectors, axis=-1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-5:
            raise EvalError("embedding rows must be L2-normalized")


# ---------------------------------------------------------------------------
# Embedding
# ---------------------------------------------------------------------------


def embed_image(images, mode: str, assembly: ModelAssembly) -> np.ndarray:
    """Global image feature(s): mode C pools the encoder tokens, mode G
    pools the middleware query features. Evaluation only; no masking."""
    if mode not in ("C", "G"):
        raise EvalError(f"image embedding mode must be 'C' or 'G', got {mode!r}")
    arr = np.asarray(images, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if mode == "G" and "queries" not in assembly.params:
        raise EvalError("mode G requires middleware weights")
    with T.no_grad():
        out = vit_encode(Tensor(arr), assembly.vit_cfg, assembly.params, train=False)
        if mode == "C":
            pooled = attention_pool(out.tokens, assembly.params, "pool_c", assembly.mw_cfg.pool_heads)
        else:
            q = cross_encode_queries(out.tokens, assembly.params, assembly.mw_cfg)
            pooled = attention_pool(q, assembly.params, "pool_g", assembly.mw_cfg.pool_heads)
    vecs = pooled.data
    return vecs[0] if single else vecs


def embed_texts(texts: Sequence[str], assembly: ModelAssembly) -> np.ndarray:
    with T.no_grad():
        enc = encode_text([tokenize(t) for t in texts], assembly.params, assembly.mw_cfg)
    return enc.t_f.data


def video_embed(frames: Sequence, mode: str, assembly: ModelAssembly) -> np.ndarray:
    """Embed each frame as an independent image, average, renormalize."""
    if len(frames) == 0:
        raise EvalError("video_embed needs at least one frame")
    vecs = embed_image(np.stack([np.asarray(f, dtype=np.float32) for f in frames]), mode, assembly)
    mean = vecs.mean(axis=0)
    return mean / max(np.linalg.norm(mean), 1e-12)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def _ranks(sim: np.ndarray) -> np.ndarray:
    """Rank (1-based) of the diagonal entry in each row, descending scores,
    ties broken by column index (stable)."""
    n = sim.shape[0]
    diag = sim[np.arange(n), np.arange(n)]
    greater = (sim > diag[:, None]).sum(axis=1)
    tie_before = ((sim == diag[:, None]) & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return greater + tie_before + 1


def retrieval_recall(images: EmbeddingSet, texts: EmbeddingSet, ks: Sequence[int]):
    """R@K in both directions: the fraction of queries whose true partner
    ranks within the top K by dot product."""
    if images.ids != texts.ids:
        raise EvalError("image and text ids must align")
    sim = images.vectors @ texts.vectors.T
    i2t = _ranks(sim)
    t2i = _ranks(sim.T)
    return {
        "image_to_text": {int(k): float((i2t <= k).mean()) for k in ks},
        "text_to_image": {int(k): float((t2i <= k).mean()) for k in ks},
    }


def recall_report(result: dict, metric: str = "recall") -> list:
    out = []
    for direction, by_k in result.items():
        for k, value in sorted(by_k.items()):
            out.append({"metric": metric, "direction": direction, "K": k, "value": value})
    return out


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------


def zero_shot_classify(
    image_embeds: np.ndarray,
    class_names: Sequence[str],
    prompt_templates: Sequence[str],
    text_encoder: Callable[[Sequence[str]], np.ndarray],
    top_k: int = 1,
):
    """Average the embeddings of every templated prompt per class,
    renormalize, then predict the argmax-cosine class."""
    if not class_names:
        raise EvalError("class_names must be non-empty")
    if not prompt_templates:
        raise EvalError("at least one prompt template required")
    class_vecs = []
    for name in class_names:
        prompts = [t.format(name) for t in prompt_templates]
        vecs = text_encoder(prompts)
        mean = vecs.mean(axis=0)
        class_vecs.append(mean / max(np.linalg.norm(mean), 1e-12))
    class_mat = np.stack(class_vecs)
    sims = np.asarray(image_embeds) @ class_mat.T
    order = np.argsort(-sims, axis=-1, kind="stable")
    return order[..., 0], order[..., :top_k], sims


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    weights: dict
    accuracy: float
    feature_dim: int


def probe_features(assembly: ModelAssembly, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen-encoder probe features: concat(mean patch tokens, class token)."""
    feats = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out = vit_encode(Tensor(np.asarray(images[i : i + batch_size], dtype=np.float32)),
                             assembly.vit_cfg, assembly.params, train=False)
            feats.append(np.concatenate([out.pooled.data, out.class_token.data], axis=-1))
    return np.concatenate(feats, axis=0)


def _batch_norm_train(x: Tensor) -> tuple:
    """Per-feature normalization over the batch axis (composed from the
    layer-norm primitive via transposition)."""
    normed = T.transpose(T.layer_norm(T.transpose(x)))
    return normed, x.data.mean(axis=0), x.data.std(axis=0)


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    eval_features: Optional[np.ndarray] = None,
    eval_labels: Optional[np.ndarray] = None,
    epochs: int = 10,
    peak_lr: float = 0.2,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
) -> ProbeResult:
    """Train feature-norm + linear head with SGD momentum on frozen features.

    The backbone never enters this function, so it cannot change; callers
    extract features once via probe_features.
    """
    rng = np.random.default_rng(seed)
    n, f = features.shape
    head = {
        "bn.gamma": Tensor(np.ones(f, dtype=np.float32), requires_grad=True),
        "bn.beta": Tensor(np.zeros(f, dtype=np.float32), requires_grad=True),
        "linear.weight": Tensor(np.zeros((f, num_classes), dtype=np.float32), requires_grad=True),
        "linear.bias": Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True),
    }
    velocity: dict = {}
    running_mean = np.zeros(f)
    running_var = np.ones(f)
    total_steps = max(1, epochs * ((n + batch_size - 1) // batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, batch_size):
            idx = order[i : i + batch_size]
            if len(idx) < 2:
                continue
            x = Tensor(features[idx])
            for p in head.values():
                p.grad = None
            normed, mu, sd = _batch_norm_train(x)
            running_mean = 0.9 * running_mean + 0.1 * mu
            running_var = 0.9 * running_var + 0.1 * sd**2
            h = T.add(T.mul(normed, head["bn.gamma"]), head["bn.beta"])
            logits = T.add(T.matmul(h, head["linear.weight"]), head["linear.bias"])
            loss = T.cross_entropy_from_logits(logits, labels[idx])
            T.backward(loss, leaves=head.values())
            lr = peak_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            sgd_momentum_step(head, head.keys(), velocity, lr, momentum)
            step += 1
    weights = {k: v.data.copy() for k, v in head.items()}
    weights["bn.running_mean"] = running_mean
    weights["bn.running_var"] = running_var
    accuracy = float("nan")
    if eval_features is not None and eval_labels is not None:
        accuracy = probe_accuracy(weights, eval_features, eval_labels)
    return ProbeResult(weights=weights, accuracy=accuracy, feature_dim=f)


def probe_accuracy(weights: dict, features: np.ndarray, labels: np.ndarray) -> float:
    x = (features - weights["bn.running_mean"]) / np.sqrt(weights["bn.running_var"] + 1e-6)
    logits = (x * weights["bn.gamma"] + weights["bn.beta"]) @ weights["linear.weight"] + weights["linear.bias"]
    return float((logits.argmax(axis=-1) == labels).mean())


# ---------------------------------------------------------------------------
# Caption generation
# ---------------------------------------------------------------------------


def caption_generate(
    image,
    assembly: ModelAssembly,
    decode: str = "greedy",
    beam_size: int = 1,
    max_len: int = 80,
) -> str:
    if max_len < 1:
        raise EvalError("max_len must be >= 1")
    if decode == "greedy":
        return caption_generate_batch([image], assembly, max_len=max_len)[0]
    if decode != "beam":
        raise EvalError(f"unknown decode mode {decode!r}")
    return _beam_caption(image, assembly, beam_size, max_len)


def caption_generate_batch(images, assembly: ModelAssembly, max_len: int = 80) -> list:
    """Greedy decoding for a batch of images."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    mw = assembly.mw_cfg
    with T.no_grad():
        tokens = vit_encode(Tensor(arr), assembly.vit_cfg, assembly.params, train=False).tokens
        seqs = [[mw.bos_id] for _ in images]
        done = [False] * len(images)
        for _ in range(max_len):
            logits = prefix_lm_logits(tokens, seqs, assembly.params, mw)
            for i, seq in enumerate(seqs):
                if done[i]:
                    continue
                nxt = int(np.argmax(logits.data[i, len(seq) - 1]))
                seq.append(nxt)
                if nxt == mw.eos_id or len(seq) >= mw.max_seq_len - 1:
                    done[i] = True
            if all(done):
                break
    return [detokenize(s) for s in seqs]


def _beam_caption(image, assembly: ModelAssembly, beam_size: int, max_len: int) -> str:
    """Beam search scored by mean token log-probability."""
    mw = assembly.mw_cfg
    arr = np.asarray(image, dtype=np.float32)[None]
    with T.no_grad():
        tokens = vit_encode(Tensor(arr), assembly.vit_cfg, assembly.params, train=False).tokens
        beams = [([mw.bos_id], 0.0, False)]
        for _ in range(max_len):
            live = [b for b in beams if not b[2]]
            if not live:
                break
            img_batch = Tensor(np.repeat(tokens.data, len(live), axis=0))
            logits = prefix_lm_logits(img_batch, [b[0] for b in live], assembly.params, mw)
            candidates = [b for b in beams if b[2]]
            for i, (seq, logp, _) in enumerate(live):
                row = logits.data[i, len(seq) - 1].astype(np.float64)
                row = row - row.max()
                lp = row - np.log(np.exp(row).sum())
                for tok in np.argsort(-lp, kind="stable")[: beam_size]:
                    tok = int(tok)
                    new_seq = seq + [tok]
                    finished = tok == mw.eos_id or len(new_seq) >= mw.max_seq_len - 1
                    candidates.append((new_seq, logp + lp[tok], finished))
            candidates.sort(key=lambda b: (-b[1] / max(len(b[0]) - 1, 1), b[0]))
            beams = candidates[:beam_size]
            if all(b[2] for b in beams):
                break
    best = beams[0]
    return detokenize(best[0])


# ---------------------------------------------------------------------------
# Embedding file format: 'IVLE' | u32 count | u32 dim |
#   per row: u32 id length | id UTF-8 | dim x little-endian float32
# ---------------------------------------------------------------------------

EMBED_MAGIC = b"IVLE"


class EmbeddingFormatError(ValueError):
    pass


def save_embeddings(embeds: EmbeddingSet, path) -> None:
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        n, dim = embeds.vectors.shape
        f.write(struct.pack("<II", n, dim))
        for i, ident in enumerate(embeds.ids):
            ib = str(ident).encode("utf-8")
            f.write(struct.pack("<I", len(ib)))
            f.write(ib)
            f.write(embeds.vectors[i].astype("<f4").tobytes())


def load_embeddings(path, modality: str = "unknown") -> EmbeddingSet:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise EmbeddingFormatError(f"truncated embedding file: {what} at offset {off}")
        out = blob[off : off + n]
        off += n
        return out

    if take(4, "magic") != EMBED_MAGIC:
        raise EmbeddingFormatError("bad magic: not an embedding file")
    count, dim = struct.unpack("<II", take(8, "header"))
    ids = []
    vecs = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        (id_len,) = struct.unpack("<I", take(4, "id length"))
        ids.append(take(id_len, "id").decode("utf-8"))
        vecs[i] = np.frombuffer(take(4 * dim, "vector"), dtype="<f4")
    if off != len(blob):
        raise EmbeddingFormatError(f"{len(blob) - off} trailing bytes after {count} rows")
    return EmbeddingSet(ids=ids, vectors=vecs, modality=modality)
