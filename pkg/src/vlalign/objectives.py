"""Training losses: symmetric contrastive, image-text matching, and
image-grounded generation, plus their weighted stage-2 combination."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .middleware import LOGIT_SCALE_MAX, itm_logits
from .tensor import Tensor


class LossInputError(ValueError):
    """Loss applied to inputs violating its contract."""


@dataclass
class ContrastiveBatch:
    """Row i of images pairs with row i of texts; rows are L2-normalized."""

    image_embeds: Tensor   # [N, E]
    text_embeds: Tensor    # [N, E]
    logit_scale: Tensor    # 0-d, stored as log-scale

    def __post_init__(self):
        if self.image_embeds.shape != self.text_embeds.shape:
            raise LossInputError(
                f"embedding shapes differ: {self.image_embeds.shape} vs {self.text_embeds.shape}"
            )
        if self.image_embeds.shape[0] < 2:
            raise LossInputError("contrastive batch needs N >= 2")
        for name, t in (("image", self.image_embeds), ("text", self.text_embeds)):
            norms = np.linalg.norm(t.data, axis=-1)
            if np.abs(norms - 1.0).max() > 1e-5:
                raise LossInputError(f"{name} embeddings are not L2-normalized")
        # keep exp(logit_scale) in (0, 100]
        np.minimum(self.logit_scale.data, np.log(LOGIT_SCALE_MAX), out=self.logit_scale.data)


def contrastive_loss(batch: ContrastiveBatch):
    """Symmetric cross entropy over the scaled similarity matrix.

    Returns (scalar loss, similarity matrix as a plain array).
    """
    n = batch.image_embeds.shape[0]
    sim = T.matmul(batch.image_embeds, T.transpose(batch.text_embeds))
    s = T.mul(sim, T.exp(batch.logit_scale))
    diag = np.arange(n)
    loss = T.scale(
        T.add(
            T.cross_entropy_from_logits(s, diag),
            T.cross_entropy_from_logits(T.transpose(s), diag),
        ),
        0.5,
    )
    return loss, s.data.copy()


def sample_negative_texts(
    rng: np.random.Generator,
    n: int,
    sim: Optional[np.ndarray] = None,
    hard: bool = False,
) -> np.ndarray:
    """One in-batch negative text index per image.

    Uniform over j != i by default; with hard=True, sampled proportionally
    to softmax of the similarity row (mining harder negatives).
    """
    neg = np.empty(n, dtype=np.int64)
    for i in range(n):
        if hard and sim is not None:
            logits = sim[i].astype(np.float64).copy()
            logits[i] = -np.inf
            p = np.exp(logits - logits.max())
            p /= p.sum()
            neg[i] = rng.choice(n, p=p)
        else:
            j = rng.integers(0, n - 1)
            neg[i] = j if j < i else j + 1
    return neg


def itm_loss(
    query_feats: Tensor,
    labels: Sequence[int],
    params: dict,
    check_balance: bool = True,
) -> Tensor:
    """Binary cross entropy on the mean-over-queries matching logit.

    query_feats: [M, K, lm_width] from the matching-mode query encoder,
    labels: [M] with 1 = matching pair, 0 = mismatched pair.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if check_balance and labels.sum() * 2 != len(labels):
        raise LossInputError(
            f"unbalanced matching batch: {labels.sum()} positives of {len(labels)}"
        )
    z = itm_logits(query_feats, params)
    m = z.shape[0]
    zeros = T.tensor(np.zeros((m, 1), dtype=z.dtype))
    two_class = T.concat([zeros, T.reshape(z, (m, 1))], axis=1)
    return T.cross_entropy_from_logits(two_class, labels)


def itg_loss(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Mean next-token cross entropy over real caption positions only."""
    if weights.sum() <= 0:
        raise LossInputError("empty caption: no positions to predict")
    v = logits.shape[-1]
    flat = T.reshape(logits, (-1, v))
    return T.cross_entropy_from_logits(flat, targets.reshape(-1), mask=weights.reshape(-1))


@dataclass
class Stage2LossReport:
    itc: Tensor
    itm: Tensor
    itg: Tensor
    total: Tensor
    weights: tuple

    def scalars(self) -> dict:
        return {
            "loss_itc": float(self.itc.data),
            "loss_itm": float(self.itm.data),
            "loss_itg": float(self.itg.data),
            "loss": float(self.total.data),
        }


def stage2_total(itc: Tensor, itm: Tensor, itg: Tensor, weights=(1.0, 1.0, 1.0)) -> Stage2LossReport:
    for name, t in (("itc", itc), ("itm", itm), ("itg", itg)):
        if not np.isfinite(t.data).all():
            raise LossInputError(f"non-finite {name} loss")
    w1, w2, w3 = weights
    total = T.add(T.add(T.scale(itc, w1), T.scale(itm, w2)), T.scale(itg, w3))
    return Stage2LossReport(itc=itc, itm=itm, itg=itg, total=total, weights=tuple(weights))
