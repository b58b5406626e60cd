"""The full model assembly: vision encoder, language middleware, and the
chat decoder + projector, with the parameter-group algebra used for
stage-wise freezing."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .chat import ChatConfig, init_chat_params
from .middleware import (
    NEW_PARAM_PREFIXES,
    MiddlewareConfig,
    init_middleware_params,
)
from .tensor import InvalidAttributeError, Tensor
from .vit import VitConfig, init_vit_params

STAGE1_PREFIXES = ("vit.", "lm.", "text_proj.", "pool_c.", "logit_scale")
RETRIEVAL_PREFIXES = STAGE1_PREFIXES + NEW_PARAM_PREFIXES


@dataclass
class ModelAssembly:
    vit_cfg: VitConfig
    mw_cfg: MiddlewareConfig
    chat_cfg: ChatConfig
    chat_mode: str           # "c": projector eats ViT tokens; "d": query features
    params: dict

    def names(self) -> set:
        return set(self.params)


def init_assembly(
    vit_cfg: VitConfig,
    mw_cfg: MiddlewareConfig,
    chat_cfg: ChatConfig,
    chat_mode: str = "d",
    seed: int = 0,
    dtype=np.float32,
) -> ModelAssembly:
    if chat_mode not in ("c", "d"):
        raise InvalidAttributeError(f"chat_mode must be 'c' or 'd', got {chat_mode!r}")
    if mw_cfg.vision_width != vit_cfg.width:
        raise InvalidAttributeError(
            f"middleware vision_width {mw_cfg.vision_width} != vit width {vit_cfg.width}"
        )
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    params.update(init_vit_params(vit_cfg, rng, dtype))
    params.update(init_middleware_params(mw_cfg, rng, dtype))
    proj_in = vit_cfg.width if chat_mode == "c" else mw_cfg.lm_width
    params.update(init_chat_params(chat_cfg, proj_in, rng, dtype))
    return ModelAssembly(vit_cfg=vit_cfg, mw_cfg=mw_cfg, chat_cfg=chat_cfg,
                         chat_mode=chat_mode, params=params)


def names_with_prefixes(params: dict, prefixes) -> set:
    return {n for n in params if n.startswith(tuple(prefixes))}


def stage_trainable_names(params: dict, stage: str, stage3_option: str = "mlp_only") -> set:
    """The trainable parameter-name set for each alignment stage.

    lm-pretrain: language backbone only (the stand-in for starting from
        pre-trained LM weights).
    1: the contrastive model (vision encoder + language backbone + pooling,
        projection, temperature) is fully trainable; the generative-stage
        additions and the chat decoder are not part of this stage's model.
    2: only the newly added query/cross-attention parameters.
    3: the projector MLP, optionally plus the middleware; the chat decoder
        stays frozen.
    retrieval-ft: the whole retrieval model.
    """
    if stage == "lm-pretrain":
        # both language models are stand-ins for pretrained weights: the
        # middleware backbone and the off-the-shelf chat decoder
        return names_with_prefixes(params, ("lm.", "chat_lm."))
    if stage == "1":
        return names_with_prefixes(params, STAGE1_PREFIXES)
    if stage == "2":
        return names_with_prefixes(params, NEW_PARAM_PREFIXES)
    if stage == "3":
        if stage3_option == "mlp_only":
            return names_with_prefixes(params, ("projector.",))
        if stage3_option == "mlp_plus_middleware":
            # the middleware parts actually on the chat path; heads that the
            # fine-tuning loss never touches stay frozen
            return names_with_prefixes(params, ("projector.", "lm.", "queries", "xattn", "img_proj."))
        raise InvalidAttributeError(f"unknown stage-3 option {stage3_option!r}")
    if stage == "retrieval-ft":
        return names_with_prefixes(params, RETRIEVAL_PREFIXES)
    raise InvalidAttributeError(f"unknown stage {stage!r}")


def set_requires_grad(params: dict, trainable: set) -> None:
    for name, p in params.items():
        p.requires_grad = name in trainable
        p.grad = None


def snapshot(params: dict, names: Optional[set] = None) -> dict:
    keys = params if names is None else names
    return {n: params[n].data.copy() for n in keys}


def changed_names(params: dict, snap: dict) -> list:
    """Names whose current values differ bitwise from the snapshot."""
    changed = []
    for n, before in snap.items():
        now = params[n].data
        if now.shape != before.shape or now.tobytes() != before.tobytes():
            changed.append(n)
    return changed
