"""Progressive alignment driver: per-stage freezing plans, AdamW with
cosine/warmup schedules and optional layer-wise decay, the resolution
switch, and deterministic training steps."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .chat import project_features, sft_forward
from .data import PairRecord, render_image, tokenize
from .middleware import (
    LOGIT_SCALE_MAX,
    QUERY_INIT_STD,
    attention_pool,
    cross_encode_queries,
    encode_text,
    generative_forward,
    lm_forward,
)
from .model import ModelAssembly, set_requires_grad, stage_trainable_names
from .objectives import (
    ContrastiveBatch,
    contrastive_loss,
    itg_loss,
    itm_loss,
    sample_negative_texts,
    stage2_total,
)
from .optim import OptimizerState, adamw_step
from .tensor import Tensor
from .vit import encode as vit_encode
from .vit import interpolate_pos_embed

STAGES = ("lm-pretrain", "1", "2", "3", "retrieval-ft")


class PlanError(ValueError):
    pass


class ScheduleError(ValueError):
    pass


@dataclass
class StagePlan:
    stage: str
    trainable: frozenset
    losses: tuple
    peak_lr: dict                    # group name -> peak lr; must hold "default"
    betas: tuple
    weight_decay: float
    warmup_steps: int
    total_steps: int
    batch_size: int
    drop_path_rate: float = 0.0
    mask_ratio: float = 0.0
    resolution: int = 32
    switch_fraction: Optional[float] = None
    switch_resolution: Optional[int] = None
    layer_decay: Optional[float] = None
    loss_weights: tuple = (1.0, 1.0, 1.0)
    itm_hard_negatives: bool = False
    grad_clip: Optional[float] = None
    stage3_option: str = "mlp_only"
    seed: int = 0

    def materialized(self) -> set:
        return set(self.trainable)


_STAGE_DEFAULTS = {
    # betas / weight decay / losses follow the published stage recipes;
    # step counts and batch sizes here are desk-scale.
    "lm-pretrain": dict(losses=("lm",), betas=(0.9, 0.95), weight_decay=0.1,
                        peak_lr={"default": 2e-3}, warmup_steps=50, total_steps=500,
                        batch_size=64),
    "1": dict(losses=("contrastive",), betas=(0.9, 0.95), weight_decay=0.1,
              peak_lr={"vision": 1e-3, "text": 1e-4, "default": 1e-3},
              warmup_steps=60, total_steps=2000, batch_size=64,
              drop_path_rate=0.2, mask_ratio=0.5, resolution=32,
              switch_fraction=0.9, switch_resolution=32),
    "2": dict(losses=("itc", "itm", "itg"), betas=(0.9, 0.98), weight_decay=0.05,
              peak_lr={"new": 1e-3, "default": 1e-3},
              warmup_steps=40, total_steps=800, batch_size=32, resolution=32),
    "3": dict(losses=("sft",), betas=(0.9, 0.999), weight_decay=0.0,
              peak_lr={"projector": 1e-3, "default": 1e-3},
              warmup_steps=20, total_steps=300, batch_size=32, resolution=32),
    "retrieval-ft": dict(losses=("contrastive_g",), betas=(0.9, 0.999), weight_decay=0.05,
                         peak_lr={"default": 1e-6}, warmup_steps=100, total_steps=300,
                         batch_size=32, drop_path_rate=0.3, layer_decay=0.9,
                         resolution=32),
}

_PLAN_FIELDS = {f for f in StagePlan.__dataclass_fields__} - {"stage", "trainable"}


def build_stage_plan(
    stage: str,
    assembly: ModelAssembly,
    overrides: Optional[dict] = None,
    force: bool = False,
) -> StagePlan:
    """Stage defaults with overrides applied; the trainable predicate is
    materialized into an explicit name set. Structural changes to the
    trainable set (e.g. unfreezing the backbone in stage 2) need force."""
    if stage not in STAGES:
        raise PlanError(f"unknown stage {stage!r}; expected one of {STAGES}")
    overrides = dict(overrides or {})
    option = overrides.pop("stage3_option", "mlp_only")
    trainable = stage_trainable_names(assembly.params, stage, option)
    if "trainable_prefixes" in overrides:
        prefixes = tuple(overrides.pop("trainable_prefixes"))
        requested = {n for n in assembly.params if n.startswith(prefixes)}
        if not force and requested - trainable:
            raise PlanError(
                f"override unfreezes {sorted(requested - trainable)[:3]}... in stage {stage}; "
                "pass force=True to allow"
            )
        trainable = requested
    defaults = dict(_STAGE_DEFAULTS[stage])
    unknown = set(overrides) - _PLAN_FIELDS
    if unknown:
        raise PlanError(f"unknown plan overrides: {sorted(unknown)}")
    defaults.update(overrides)
    defaults["stage3_option"] = option
    plan = StagePlan(stage=stage, trainable=frozenset(trainable), **defaults)
    if "default" not in plan.peak_lr:
        raise PlanError("peak_lr must define a 'default' group")
    if plan.warmup_steps > plan.total_steps:
        raise PlanError("warmup_steps exceeds total_steps")
    return plan


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


def lr_at(
    step: int,
    plan: StagePlan,
    layer_index: Optional[int] = None,
    layer_total: Optional[int] = None,
    peak: Optional[float] = None,
) -> float:
    """Linear warmup to the peak, then cosine decay to zero.

    With layer decay delta active, the rate is multiplied by
    delta ** (layer_total - layer_index); the topmost layer keeps the peak.
    """
    if not 0 <= step <= plan.total_steps:
        raise ScheduleError(f"step {step} outside [0, {plan.total_steps}]")
    if peak is None:
        peak = plan.peak_lr["default"]
    w = plan.warmup_steps
    if step < w:
        lr = peak * step / w
    elif plan.total_steps == w:
        lr = peak
    else:
        progress = (step - w) / (plan.total_steps - w)
        lr = peak * 0.5 * (1.0 + math.cos(math.pi * progress))
    if plan.layer_decay is not None and layer_index is not None:
        if layer_total is None:
            raise ScheduleError("layer_total required with layer_index")
        lr *= plan.layer_decay ** (layer_total - layer_index)
    return lr


_BLOCK_RE = re.compile(r"^(vit|lm)\.block(\d+)\.")


def group_of(name: str) -> str:
    if name.startswith(("vit.", "pool_c.")) or name == "logit_scale":
        return "vision"
    if name.startswith(("lm.", "text_proj.")):
        return "text"
    if name.startswith(("queries", "xattn", "img_proj.", "pool_g.", "itm_head.")):
        return "new"
    if name.startswith("projector."):
        return "projector"
    if name.startswith("chat_lm."):
        return "chat"
    return "default"


def layer_index_of(name: str, assembly: ModelAssembly):
    """(layer index, layer total) for layer-wise decay, or None for
    parameters outside the two transformer towers."""
    m = _BLOCK_RE.match(name)
    if m:
        tower, i = m.group(1), int(m.group(2))
        total = assembly.vit_cfg.depth if tower == "vit" else assembly.mw_cfg.lm_depth
        return int(i) + 1, total
    if name.startswith(("vit.patch_embed", "vit.pos_embed", "vit.cls_token")):
        return 0, assembly.vit_cfg.depth
    if name.startswith(("lm.tok_embed", "lm.pos_embed")):
        return 0, assembly.mw_cfg.lm_depth
    if name.startswith("vit.final_ln"):
        return assembly.vit_cfg.depth, assembly.vit_cfg.depth
    if name.startswith(("lm.final_ln", "lm.head", "text_proj.")):
        return assembly.mw_cfg.lm_depth, assembly.mw_cfg.lm_depth
    return None


def make_lr_fn(plan: StagePlan, assembly: ModelAssembly, step: int):
    def lr_for(name: str) -> float:
        peak = plan.peak_lr.get(group_of(name), plan.peak_lr["default"])
        if plan.layer_decay is not None:
            loc = layer_index_of(name, assembly)
            if loc is not None:
                return lr_at(step, plan, layer_index=loc[0], layer_total=loc[1], peak=peak)
        return lr_at(step, plan, peak=peak)

    return lr_for


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class _Runtime:
    resolution: int
    mask_ratio: float
    raster_cache: dict = field(default_factory=dict)


def _images_tensor(records: Sequence[PairRecord], resolution: int, cache: dict) -> Tensor:
    arrs = []
    for rec in records:
        key = (rec.spec.to_json(), resolution)
        img = cache.get(key)
        if img is None:
            img = render_image(rec.spec, resolution)
            cache[key] = img
        arrs.append(img)
    return T.tensor(np.stack(arrs))


def _caption_ids(records: Sequence[PairRecord]) -> list:
    return [tokenize(rec.caption) for rec in records]


PROMPT_TEXT = "describe the image.\n"


def _sft_prompt_ids() -> list:
    return [256] + list(PROMPT_TEXT.encode("utf-8"))  # BOS + prompt bytes


def _hint_prefix(
    caption_ids,
    tok_embed: np.ndarray,
    k: int,
    rng: np.random.Generator,
    noise_scale: float = QUERY_INIT_STD,
    hint_prob: float = 0.5,
) -> np.ndarray:
    """Soft-prompt vectors for language-model pretraining.

    Half the rows are pure noise (robustness to arbitrary prefixes), half
    carry noised embeddings of the caption's leading tokens (prefixes are
    worth attending to when informative). This is what lets the frozen
    backbone consume learned queries later without leaving distribution.
    """
    b = len(caption_ids)
    out = rng.normal(0.0, noise_scale, size=(b, k, tok_embed.shape[1]))
    for i, ids in enumerate(caption_ids):
        if rng.random() < hint_prob:
            toks = np.asarray(ids[1 : 1 + k], dtype=np.int64)
            out[i, : len(toks)] += tok_embed[toks]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Train steps
# ---------------------------------------------------------------------------


def train_step(
    assembly: ModelAssembly,
    records: Sequence[PairRecord],
    plan: StagePlan,
    opt_state: OptimizerState,
    rng: np.random.Generator,
    step: int,
    runtime: Optional[_Runtime] = None,
) -> dict:
    """One forward/backward/update; returns the step's metrics record."""
    if runtime is None:
        runtime = _Runtime(resolution=plan.resolution, mask_ratio=plan.mask_ratio)
    params = assembly.params
    for name in plan.trainable:
        params[name].grad = None

    report = {"loss_itc": None, "loss_itm": None, "loss_itg": None}
    if plan.stage == "lm-pretrain":
        loss = _lm_pretrain_forward(assembly, records, rng)
    elif plan.stage == "1":
        loss, _ = _contrastive_forward(assembly, records, plan, rng, runtime, mode="c")
        report["loss_itc"] = float(loss.data)
    elif plan.stage == "retrieval-ft":
        loss, _ = _contrastive_forward(assembly, records, plan, rng, runtime, mode="g")
        report["loss_itc"] = float(loss.data)
    elif plan.stage == "2":
        loss, report = _stage2_forward(assembly, records, plan, rng, runtime)
    elif plan.stage == "3":
        loss = _sft_forward(assembly, records, runtime)
    else:
        raise PlanError(f"unknown stage {plan.stage!r}")

    T.backward(loss, leaves=[params[n] for n in plan.trainable])
    adamw_step(
        params,
        plan.trainable,
        opt_state,
        make_lr_fn(plan, assembly, step),
        betas=plan.betas,
        weight_decay=plan.weight_decay,
    )
    if "logit_scale" in plan.trainable:
        np.minimum(params["logit_scale"].data, np.log(LOGIT_SCALE_MAX), out=params["logit_scale"].data)
    return {
        "step": step,
        "stage": plan.stage,
        "loss": float(loss.data),
        **report,
        "lr": lr_at(step, plan),
        "mask_ratio": runtime.mask_ratio,
        "resolution": runtime.resolution,
    }


def _lm_pretrain_forward(assembly, records, rng):
    """Pretrain both language models on captions behind hint prefixes."""
    params = assembly.params
    mw = assembly.mw_cfg
    captions = _caption_ids(records)
    prefix = _hint_prefix(captions, params["lm.tok_embed"].data, mw.num_queries, rng)
    logits, targets, weights = lm_forward(captions, params, mw, prefix=prefix)
    loss = itg_loss(logits, targets, weights)

    k_chat = mw.num_queries if assembly.chat_mode == "d" else assembly.vit_cfg.num_patches + 1
    chat_prefix = _hint_prefix(captions, params["chat_lm.tok_embed"].data, k_chat, rng)
    prompt = _sft_prompt_ids()
    responses = [list(rec.caption.encode("utf-8")) + [assembly.chat_cfg.eos_id] for rec in records]
    c_logits, c_targets, c_weights = sft_forward(
        T.tensor(chat_prefix), [prompt] * len(records), responses, params, assembly.chat_cfg
    )
    return T.add(loss, itg_loss(c_logits, c_targets, c_weights))


def _contrastive_forward(assembly, records, plan, rng, runtime, mode: str):
    params = assembly.params
    images = _images_tensor(records, runtime.resolution, runtime.raster_cache)
    out = vit_encode(
        images, assembly.vit_cfg, params,
        mask_ratio=runtime.mask_ratio, train=True, rng=rng,
        drop_path_rate=plan.drop_path_rate,
    )
    if mode == "c":
        i_f = attention_pool(out.tokens, params, "pool_c", assembly.mw_cfg.pool_heads)
    else:
        q = cross_encode_queries(out.tokens, params, assembly.mw_cfg)
        i_f = attention_pool(q, params, "pool_g", assembly.mw_cfg.pool_heads)
    t_f = encode_text(_caption_ids(records), params, assembly.mw_cfg).t_f
    loss, sim = contrastive_loss(ContrastiveBatch(i_f, t_f, params["logit_scale"]))
    return loss, sim


def _stage2_forward(assembly, records, plan, rng, runtime):
    params = assembly.params
    mw = assembly.mw_cfg
    captions = _caption_ids(records)
    images = _images_tensor(records, runtime.resolution, runtime.raster_cache)
    with T.no_grad():
        vit_tokens = vit_encode(images, assembly.vit_cfg, params, train=False).tokens
        t_f = encode_text(captions, params, mw).t_f

    # ITC on the query path (the text tower is frozen here)
    q = cross_encode_queries(vit_tokens, params, mw)
    i_f = attention_pool(q, params, "pool_g", mw.pool_heads)
    itc, sim = contrastive_loss(ContrastiveBatch(i_f, t_f, params["logit_scale"]))

    # ITM over matched + in-batch mismatched pairs in one joint pass
    n = len(records)
    neg = sample_negative_texts(rng, n, sim=sim, hard=plan.itm_hard_negatives)
    both_imgs = T.tensor(np.concatenate([vit_tokens.data, vit_tokens.data], axis=0))
    both_caps = captions + [captions[j] for j in neg]
    feats = cross_encode_queries(both_imgs, params, mw, text_ids=both_caps)
    itm = itm_loss(feats, [1] * n + [0] * n, params)

    logits, targets, weights = generative_forward(vit_tokens, captions, params, mw)
    itg = itg_loss(logits, targets, weights)

    rep = stage2_total(itc, itm, itg, plan.loss_weights)
    scalars = rep.scalars()
    return rep.total, {
        "loss_itc": scalars["loss_itc"],
        "loss_itm": scalars["loss_itm"],
        "loss_itg": scalars["loss_itg"],
    }


def _sft_forward(assembly, records, runtime):
    params = assembly.params
    images = _images_tensor(records, runtime.resolution, runtime.raster_cache)
    with T.no_grad():
        vit_out = vit_encode(images, assembly.vit_cfg, params, train=False)
        if assembly.chat_mode == "c":
            feats = vit_out.tokens
        else:
            feats = cross_encode_queries(vit_out.tokens, params, assembly.mw_cfg)
    prefix = project_features(feats, params)
    prompt = _sft_prompt_ids()
    prompts = [prompt for _ in records]
    responses = [list(rec.caption.encode("utf-8")) + [257] for rec in records]
    logits, targets, weights = sft_forward(prefix, prompts, responses, params, assembly.chat_cfg)
    return itg_loss(logits, targets, weights)


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------


def _batches(records, batch_size, total_steps, rng):
    n = len(records)
    order = []
    for _ in range(total_steps):
        if len(order) < batch_size:
            fresh = np.arange(n)
            rng.shuffle(fresh)
            order.extend(fresh.tolist())
        picked = order[:batch_size]
        del order[:batch_size]
        yield [records[i] for i in picked]


def run_stage(
    plan: StagePlan,
    records: Sequence[PairRecord],
    assembly: ModelAssembly,
    out_dir,
    checkpoint_in=None,
) -> dict:
    """Run total_steps training steps, applying the resolution switch at the
    configured fraction; writes a checkpoint and a JSONL metrics stream."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if checkpoint_in is not None:
        ckpt.load_checkpoint(checkpoint_in, assembly.params, config_digest=None)

    set_requires_grad(assembly.params, set(plan.trainable))
    rng = np.random.default_rng(plan.seed)
    opt_state = OptimizerState()
    runtime = _Runtime(resolution=plan.resolution, mask_ratio=plan.mask_ratio)
    switch_step = None
    if plan.switch_fraction is not None and plan.switch_resolution is not None:
        switch_step = int(plan.total_steps * plan.switch_fraction)

    metrics_path = out_dir / f"metrics-stage-{plan.stage}.jsonl"
    ckpt_path = out_dir / f"checkpoint-stage-{plan.stage}.ivlc"
    metrics = []
    with open(metrics_path, "w") as mf:
        for step, batch in enumerate(_batches(records, plan.batch_size, plan.total_steps, rng)):
            if switch_step is not None and step == switch_step:
                _apply_resolution_switch(assembly, plan.switch_resolution, opt_state)
                runtime.resolution = plan.switch_resolution
                runtime.mask_ratio = 0.0
            rec = train_step(assembly, batch, plan, opt_state, rng, step, runtime)
            metrics.append(rec)
            mf.write(json.dumps(rec) + "\n")
    # leave every parameter live for downstream consumers
    for p in assembly.params.values():
        p.requires_grad = True
        p.grad = None
    ckpt.save_checkpoint(assembly.params, ckpt_path, config_digest=ckpt.assembly_digest(assembly))
    return {"checkpoint": ckpt_path, "metrics": metrics_path, "records": metrics}


def _apply_resolution_switch(assembly: ModelAssembly, new_resolution: int, opt_state: OptimizerState):
    cfg = assembly.vit_cfg
    old_grid = int(round(np.sqrt(assembly.params["vit.pos_embed"].shape[0] - 1)))
    new_grid = new_resolution // cfg.patch_size
    if new_grid == old_grid:
        return
    resampled = interpolate_pos_embed(assembly.params["vit.pos_embed"].data, old_grid, new_grid)
    old = assembly.params["vit.pos_embed"]
    fresh = Tensor(resampled.astype(old.data.dtype), requires_grad=old.requires_grad)
    assembly.params["vit.pos_embed"] = fresh
    opt_state.reset("vit.pos_embed")
