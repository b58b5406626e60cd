"""Finite-difference verification suites.

Every autodiff primitive and every composite training loss is checked
against central differences in 64-bit mode over many seeded random
instances. Primitives must agree to 1e-6; composite losses, whose FD
baselines stack more round-off, to 1e-3 (contrastive to 1e-5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .middleware import (
    MiddlewareConfig,
    attention_pool,
    cross_encode_queries,
    generative_forward,
    init_middleware_params,
)
from .objectives import ContrastiveBatch, contrastive_loss, itg_loss, itm_loss, stage2_total
from .tensor import Tensor, grad_check

PRIMITIVE_TOL = 1e-6
CONTRASTIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-3


@dataclass
class SuiteEntry:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def _t(rng, shape, scale=1.0):
    return T.tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=np.float64)


def _const(rng, shape):
    return T.tensor(rng.normal(size=shape), dtype=np.float64)


def _primitive_cases(rng):
    """One scalar-valued f per primitive, with fresh random inputs.

    Downstream constants are drawn once so each f is deterministic.
    """
    c34 = _const(rng, (3, 4))
    c43 = _const(rng, (4, 3))
    c26 = _const(rng, (2, 6))
    c22 = _const(rng, (2, 2))
    c222 = _const(rng, (2, 2, 2))
    c223 = _const(rng, (2, 2, 3))
    c234 = _const(rng, (2, 3, 4))
    c423 = _const(rng, (4, 2, 3))
    c3 = _const(rng, (3,))
    c4 = _const(rng, (4,))
    mask = rng.random((3, 4)) < 0.6
    mask[:, 0] = True  # keep at least one position per row
    targets = rng.integers(0, 5, size=4)
    idx_dup = rng.integers(0, 5, size=4)
    gidx = rng.integers(0, 4, size=(2, 2))
    ids = rng.integers(0, 7, size=(2, 3))
    axis = int(rng.integers(0, 2))
    c_cat = c43 if axis == 0 else c26

    def seeded_rng():
        return np.random.default_rng(1234)

    return {
        "matmul": (lambda a, b: T.sum_(T.matmul(a, b)), [_t(rng, (2, 3)), _t(rng, (3, 4))]),
        "matmul_batched": (
            lambda a, b: T.sum_(T.mul(T.matmul(a, b), c222)),
            [_t(rng, (2, 2, 3)), _t(rng, (3, 2))],
        ),
        "add": (lambda a, b: T.sum_(T.mul(T.add(a, b), c34)), [_t(rng, (3, 4)), _t(rng, (4,))]),
        "mul": (lambda a, b: T.sum_(T.mul(a, b)), [_t(rng, (3, 4)), _t(rng, (3, 1))]),
        "scale": (lambda a: T.sum_(T.scale(a, 1.7)), [_t(rng, (3, 4))]),
        "exp": (lambda a: T.sum_(T.mul(T.exp(a), c34)), [_t(rng, (3, 4), 0.5)]),
        "transpose": (lambda a: T.sum_(T.mul(T.transpose(a, (1, 0)), c43)), [_t(rng, (3, 4))]),
        "reshape": (lambda a: T.sum_(T.mul(T.reshape(a, (2, 6)), c26)), [_t(rng, (3, 4))]),
        "concat": (
            lambda a, b: T.sum_(T.mul(T.concat([a, b], axis=axis), c_cat)),
            [_t(rng, (2, 3)), _t(rng, (2, 3))],
        ),
        "slice": (lambda a: T.sum_(T.mul(T.slice_(a, (slice(1, 3), slice(None, 2))), c22)), [_t(rng, (3, 4))]),
        "index_select": (lambda a: T.sum_(T.mul(T.index_select(a, 0, idx_dup), c43)), [_t(rng, (5, 3))]),
        "gather_rows": (lambda a: T.sum_(T.mul(T.gather_rows(a, gidx), c223)), [_t(rng, (2, 4, 3))]),
        "embedding": (lambda w: T.sum_(T.mul(T.embedding(w, ids), c234)), [_t(rng, (7, 4))]),
        "softmax": (lambda a: T.sum_(T.mul(T.softmax(a), c34)), [_t(rng, (3, 4))]),
        "layer_norm": (lambda a: T.sum_(T.mul(T.layer_norm(a), c34)), [_t(rng, (3, 4))]),
        "gelu": (lambda a: T.sum_(T.gelu(a)), [_t(rng, (3, 4))]),
        "masked_fill": (
            lambda a: T.sum_(T.mul(T.softmax(T.masked_fill(a, mask)), c34)),
            [_t(rng, (3, 4))],
        ),
        "cross_entropy": (lambda a: T.cross_entropy_from_logits(a, targets), [_t(rng, (4, 5))]),
        "cross_entropy_masked": (
            lambda a: T.cross_entropy_from_logits(a, targets, mask=np.array([1.0, 0.0, 1.0, 1.0])),
            [_t(rng, (4, 5))],
        ),
        "sum": (lambda a: T.sum_(T.mul(T.sum_(a, axis=1), c3)), [_t(rng, (3, 4))]),
        "mean": (lambda a: T.sum_(T.mul(T.mean(a, axis=0), c4)), [_t(rng, (3, 4))]),
        "dropout": (
            lambda a: T.sum_(T.mul(T.dropout(a, 0.3, rng=seeded_rng(), train=True), c34)),
            [_t(rng, (3, 4))],
        ),
        "drop_path": (
            lambda a: T.sum_(T.mul(T.drop_path(a, 0.5, rng=seeded_rng(), train=True), c423)),
            [_t(rng, (4, 2, 3))],
        ),
        "l2_normalize": (lambda a: T.sum_(T.mul(T.l2_normalize(a), c34)), [_t(rng, (3, 4))]),
    }


def primitive_suite(instances: int = 100, seed: int = 0) -> list:
    """Max FD relative error per primitive over seeded random instances."""
    worst: dict[str, float] = {}
    for k in range(instances):
        rng = np.random.default_rng(seed * 100003 + k)
        for name, (f, xs) in _primitive_cases(rng).items():
            rep = grad_check(f, xs)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
    return [SuiteEntry(n, e, PRIMITIVE_TOL, instances) for n, e in sorted(worst.items())]


# ---------------------------------------------------------------------------
# Composite losses
# ---------------------------------------------------------------------------

_TINY_MW = MiddlewareConfig(
    lm_width=16, lm_depth=2, lm_heads=2, vision_width=8, vocab_size=24,
    max_seq_len=12, num_queries=2, cross_attn_stride=2, embed_dim=8,
    pool_heads=2, bos_id=21, eos_id=22, pad_id=23,
)


def _tiny_model(rng):
    params = init_middleware_params(_TINY_MW, rng, dtype=np.float64)
    for p in params.values():
        p.requires_grad = False
    # a zero matching head has a flat FD landscape; randomize it here
    params["itm_head.weight"].data[...] = rng.normal(0.0, 0.5, size=params["itm_head.weight"].shape)
    return params


def _tiny_captions(rng, n):
    caps = []
    for _ in range(n):
        body = rng.integers(0, 21, size=int(rng.integers(2, 6))).tolist()
        caps.append([_TINY_MW.bos_id] + body + [_TINY_MW.eos_id])
    return caps


def _check_params(params, names):
    xs = [params[n] for n in names]
    for x in xs:
        x.requires_grad = True
    return xs


def composite_suite(instances: int = 100, seed: int = 0) -> list:
    worst = {"contrastive": 0.0, "itm": 0.0, "itg": 0.0, "stage2_total": 0.0}
    for k in range(instances):
        rng = np.random.default_rng(seed * 90001 + k)

        # contrastive on random 4x8 embeddings
        iv = _t(rng, (4, 8))
        tv = _t(rng, (4, 8))
        ls = T.tensor(np.log(rng.uniform(1.0, 20.0)), requires_grad=True, dtype=np.float64)

        def f_con(a, b, s):
            batch = ContrastiveBatch(T.l2_normalize(a), T.l2_normalize(b), s)
            return contrastive_loss(batch)[0]

        rep = grad_check(f_con, [iv, tv, ls])
        worst["contrastive"] = max(worst["contrastive"], rep.max_rel_error)

        params = _tiny_model(rng)
        img = _const(rng, (2, 3, _TINY_MW.vision_width))
        caps = _tiny_captions(rng, 2)
        caps_itm = caps + [caps[1], caps[0]]
        labels = [1, 1, 0, 0]
        img_itm = T.tensor(np.concatenate([img.data, img.data], axis=0), dtype=np.float64)

        def f_itm(*_):
            feats = cross_encode_queries(img_itm, params, _TINY_MW, text_ids=caps_itm)
            return itm_loss(feats, labels, params)

        xs = _check_params(params, ["queries", "xattn0.q.weight", "img_proj.weight", "itm_head.weight"])
        rep = grad_check(f_itm, xs, max_elements=8, rng=rng)
        worst["itm"] = max(worst["itm"], rep.max_rel_error)

        def f_itg(*_):
            logits, targets, wts = generative_forward(img, caps, params, _TINY_MW)
            return itg_loss(logits, targets, wts)

        rep = grad_check(f_itg, xs, max_elements=8, rng=rng)
        worst["itg"] = max(worst["itg"], rep.max_rel_error)

        t_f_fixed = T.tensor(rng.normal(size=(2, _TINY_MW.embed_dim)), dtype=np.float64)

        def f_total(*_):
            q = cross_encode_queries(img, params, _TINY_MW)
            i_f = attention_pool(q, params, "pool_g", _TINY_MW.pool_heads)
            itc, _ = contrastive_loss(
                ContrastiveBatch(i_f, T.l2_normalize(t_f_fixed), params["logit_scale"])
            )
            feats = cross_encode_queries(img_itm, params, _TINY_MW, text_ids=caps_itm)
            itm = itm_loss(feats, labels, params)
            logits, targets, wts = generative_forward(img, caps, params, _TINY_MW)
            itg = itg_loss(logits, targets, wts)
            return stage2_total(itc, itm, itg).total

        xs2 = _check_params(params, ["queries", "img_proj.weight", "xattn0.out.weight",
                                     "pool_g.out.weight", "itm_head.weight"])
        rep = grad_check(f_total, xs2, max_elements=6, rng=rng)
        worst["stage2_total"] = max(worst["stage2_total"], rep.max_rel_error)

    tol = {"contrastive": CONTRASTIVE_TOL, "itm": COMPOSITE_TOL, "itg": COMPOSITE_TOL,
           "stage2_total": COMPOSITE_TOL}
    return [SuiteEntry(n, e, tol[n], instances) for n, e in sorted(worst.items())]


def run_suite(which: str = "full") -> list:
    if which == "quick":
        return primitive_suite(instances=5) + composite_suite(instances=3)
    if which == "full":
        return primitive_suite(instances=100) + composite_suite(instances=100)
    raise ValueError(f"unknown suite {which!r} (expected quick or full)")
