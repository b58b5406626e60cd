"""Vision transformer encoder: patch embedding, token masking, drop path,
dense feature maps, and closed-form parameter/FLOP calculators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import (
    affine_layer_norm,
    broadcast_rows,
    init_block_params,
    linear,
    normal_param,
    ones_param,
    self_attention_block,
    zeros_param,
)
from .tensor import InvalidAttributeError, ShapeMismatchError, Tensor


@dataclass(frozen=True)
class VitConfig:
    width: int
    depth: int
    mlp_dim: int
    num_heads: int
    patch_size: int = 8
    image_size: int = 32
    drop_path_rate: float = 0.0
    use_class_token: bool = True

    def __post_init__(self):
        if self.width % self.num_heads != 0:
            raise InvalidAttributeError(
                f"width {self.width} not divisible by num_heads {self.num_heads}"
            )
        if self.image_size % self.patch_size != 0:
            raise InvalidAttributeError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )

    @property
    def head_dim(self) -> int:
        return self.width // self.num_heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


# Hyperparameter-search configurations (width / depth / MLP / heads at
# patch 14, 224x224); "table2" is the selected production model.
SEARCH_VARIANTS = {
    "1": VitConfig(3968, 32, 15872, 62, patch_size=14, image_size=224),
    "2": VitConfig(3200, 48, 12800, 50, patch_size=14, image_size=224),
    "3": VitConfig(3200, 48, 12800, 25, patch_size=14, image_size=224),
    "4": VitConfig(2496, 48, 19968, 39, patch_size=14, image_size=224),
    "5": VitConfig(2816, 64, 11264, 44, patch_size=14, image_size=224),
    "6": VitConfig(2496, 80, 9984, 39, patch_size=14, image_size=224),
}
SEARCH_VARIANTS["table2"] = SEARCH_VARIANTS["3"]


def init_vit_params(cfg: VitConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    """All encoder parameters, keyed 'vit.*'."""
    d = cfg.width
    params: dict[str, Tensor] = {}
    params["vit.patch_embed.weight"] = normal_param(rng, (3 * cfg.patch_size**2, d), dtype=dtype)
    params["vit.patch_embed.bias"] = zeros_param((d,), dtype)
    rows = cfg.num_patches + (1 if cfg.use_class_token else 0)
    params["vit.pos_embed"] = normal_param(rng, (rows, d), dtype=dtype)
    if cfg.use_class_token:
        params["vit.cls_token"] = normal_param(rng, (1, d), dtype=dtype)
    for i in range(cfg.depth):
        init_block_params(params, f"vit.block{i}", d, cfg.mlp_dim, cfg.depth, rng, dtype)
    params["vit.final_ln.gamma"] = ones_param((d,), dtype)
    params["vit.final_ln.beta"] = zeros_param((d,), dtype)
    return params


@dataclass
class VitOutput:
    tokens: Tensor          # [B, T(+1), D] after the final norm
    class_token: Optional[Tensor]   # [B, D]
    pooled: Tensor          # [B, D], mean over patch tokens
    feature_map: Optional[Tensor]   # [B, H/P, W/P, D]; only without masking
    kept_indices: Optional[np.ndarray]  # [B, K] patch indices kept, or None


def mask_tokens(
    tokens: Tensor,
    pos_embed: Tensor,
    mask_ratio: float,
    seed: int,
):
    """Keep a uniform random subset of ceil(T*(1-ratio)) patch tokens.

    Returns (tokens + positional rows gathered by the same kept indices,
    kept index list). The class token is handled by the caller and is
    never masked.
    """
    if not 0.0 <= mask_ratio < 1.0:
        raise InvalidAttributeError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    n = tokens.shape[0]
    keep = int(np.ceil(n * (1.0 - mask_ratio)))
    if mask_ratio == 0.0:
        idx = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(n, size=keep, replace=False))
    kept = T.index_select(T.add(tokens, pos_embed), 0, idx)
    return kept, idx


def sample_keep_indices(
    rng: np.random.Generator, batch: int, n_tokens: int, mask_ratio: float
) -> np.ndarray:
    """Independent per-sample kept-index sets, each sorted, shape [B, K]."""
    keep = int(np.ceil(n_tokens * (1.0 - mask_ratio)))
    if mask_ratio == 0.0:
        return np.tile(np.arange(n_tokens), (batch, 1))
    out = np.empty((batch, keep), dtype=np.int64)
    for b in range(batch):
        out[b] = np.sort(rng.choice(n_tokens, size=keep, replace=False))
    return out


def encode(
    image: Tensor,
    cfg: VitConfig,
    params: dict,
    mask_ratio: float = 0.0,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    drop_path_rate: Optional[float] = None,
) -> VitOutput:
    """Run the encoder on [H, W, 3] or a batch [B, H, W, 3]."""
    single = image.ndim == 3
    x = T.reshape(image, (1,) + image.shape) if single else image
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeMismatchError(f"encode: expected [B, H, W, 3] image, got {image.shape}")
    b, h, w, _ = x.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise InvalidAttributeError(f"resolution {h}x{w} not divisible by patch size {p}")
    if not 0.0 <= mask_ratio < 1.0:
        raise InvalidAttributeError(f"mask_ratio must be in [0, 1), got {mask_ratio}")
    if mask_ratio > 0.0 and not train:
        raise InvalidAttributeError("token masking is train-only")
    gh, gw = h // p, w // p
    pos = params["vit.pos_embed"]
    expected_rows = gh * gw + (1 if cfg.use_class_token else 0)
    if pos.shape[0] != expected_rows:
        raise ShapeMismatchError(
            f"pos_embed has {pos.shape[0]} rows, input grid {gh}x{gw} needs {expected_rows}; "
            "interpolate_pos_embed first"
        )
    if drop_path_rate is None:
        drop_path_rate = cfg.drop_path_rate if train else 0.0

    patches = T.reshape(
        T.transpose(T.reshape(x, (b, gh, p, gw, p, 3)), (0, 1, 3, 2, 4, 5)),
        (b, gh * gw, p * p * 3),
    )
    tok = linear(patches, params["vit.patch_embed.weight"], params["vit.patch_embed.bias"])
    if cfg.use_class_token:
        patch_pos = T.slice_(pos, (slice(1, None),))
        cls_row = T.add(params["vit.cls_token"], T.slice_(pos, (slice(0, 1),)))
    else:
        patch_pos = pos
        cls_row = None
    tok = T.add(tok, patch_pos)

    kept_idx = None
    if mask_ratio > 0.0:
        if rng is None:
            raise InvalidAttributeError("token masking requires an rng")
        kept_idx = sample_keep_indices(rng, b, gh * gw, mask_ratio)
        tok = T.gather_rows(tok, kept_idx)

    if cls_row is not None:
        tok = T.concat([broadcast_rows(cls_row, b), tok], axis=1)

    for i in range(cfg.depth):
        tok = self_attention_block(
            tok, params, f"vit.block{i}", cfg.num_heads,
            drop_path_rate=drop_path_rate, train=train, rng=rng,
        )
    tok = affine_layer_norm(tok, params["vit.final_ln.gamma"], params["vit.final_ln.beta"])

    if cfg.use_class_token:
        cls_out = T.reshape(T.slice_(tok, (slice(None), slice(0, 1))), (b, cfg.width))
        patch_out = T.slice_(tok, (slice(None), slice(1, None)))
    else:
        cls_out = None
        patch_out = tok
    pooled = T.mean(patch_out, axis=1)
    feature_map = None
    if mask_ratio == 0.0:
        feature_map = T.reshape(patch_out, (b, gh, gw, cfg.width))

    if single:
        tok = T.reshape(tok, tok.shape[1:])
        pooled = T.reshape(pooled, (cfg.width,))
        if cls_out is not None:
            cls_out = T.reshape(cls_out, (cfg.width,))
        if feature_map is not None:
            feature_map = T.reshape(feature_map, (gh, gw, cfg.width))
        if kept_idx is not None:
            kept_idx = kept_idx[0]
    return VitOutput(tokens=tok, class_token=cls_out, pooled=pooled,
                     feature_map=feature_map, kept_indices=kept_idx)


def interpolate_pos_embed(pos_embed: np.ndarray, from_grid: int, to_grid: int) -> np.ndarray:
    """Bilinearly resample the patch-grid rows; the class-token row (row 0)
    passes through unchanged. Uses align-corners endpoint mapping, which
    preserves constants and corners exactly."""
    rows, d = pos_embed.shape
    if rows != from_grid * from_grid + 1:
        raise ShapeMismatchError(
            f"pos_embed has {rows} rows, expected {from_grid * from_grid + 1} for grid {from_grid}"
        )
    if to_grid == from_grid:
        return pos_embed.copy()
    cls = pos_embed[:1]
    grid = pos_embed[1:].reshape(from_grid, from_grid, d)
    out = _bilinear_resample(grid, to_grid)
    return np.concatenate([cls, out.reshape(to_grid * to_grid, d)], axis=0)


def _bilinear_resample(grid: np.ndarray, to_grid: int) -> np.ndarray:
    g1 = grid.shape[0]
    if g1 == 1:
        return np.broadcast_to(grid, (to_grid, to_grid, grid.shape[-1])).copy()
    coords = (
        np.arange(to_grid) * (g1 - 1) / (to_grid - 1)
        if to_grid > 1
        else np.array([0.5 * (g1 - 1)])
    )
    i0 = np.floor(coords).astype(np.int64)
    i1 = np.minimum(i0 + 1, g1 - 1)
    frac = coords - i0
    # rows then columns; separable bilinear
    top = grid[i0]
    bot = grid[i1]
    rows = top + (bot - top) * frac[:, None, None]
    left = rows[:, i0]
    right = rows[:, i1]
    return left + (right - left) * frac[None, :, None]


def count_params(cfg: VitConfig) -> int:
    """Exact parameter count; matches the element total of init_vit_params."""
    d, m = cfg.width, cfg.mlp_dim
    g2 = cfg.num_patches
    total = 3 * cfg.patch_size**2 * d + d            # patch embedding
    total += (g2 + (1 if cfg.use_class_token else 0)) * d  # positions
    if cfg.use_class_token:
        total += d
    per_block = (
        (3 * d * d + 3 * d)      # qkv
        + (d * d + d)            # attention out
        + (d * m + m + m * d + d)  # mlp
        + 4 * d                  # two layer norms
    )
    total += cfg.depth * per_block
    total += 2 * d               # final layer norm
    return total


def estimate_flops(cfg: VitConfig, resolution: Optional[int] = None) -> float:
    """GFLOPs under the multiply-accumulate convention (1 MAC = 1 FLOP)."""
    res = cfg.image_size if resolution is None else resolution
    if res % cfg.patch_size:
        raise InvalidAttributeError(f"resolution {res} not divisible by patch {cfg.patch_size}")
    g2 = (res // cfg.patch_size) ** 2
    t = g2 + (1 if cfg.use_class_token else 0)
    d, m = cfg.width, cfg.mlp_dim
    macs = g2 * (3 * cfg.patch_size**2 * d)
    per_block = t * (3 * d * d + d * d + 2 * d * m) + 2 * t * t * d
    macs += cfg.depth * per_block
    return macs / 1e9
