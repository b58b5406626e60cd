"""Synthetic image-text pairs, byte-level tokenization, two-tier caption
filtering, and content-hash deduplication against evaluation sets."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
VOCAB_SIZE = 259

SHAPES = ("circle", "square", "triangle")

COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.25),
    "blue": (0.20, 0.35, 0.90),
    "yellow": (0.92, 0.86, 0.20),
    "purple": (0.60, 0.25, 0.80),
    "orange": (0.95, 0.55, 0.15),
    "cyan": (0.20, 0.80, 0.85),
    "white": (0.95, 0.95, 0.95),
}

GRID = 2
# compact corner names keep byte-level captions short
CELLS = ("nw", "ne", "sw", "se")
LANGUAGES = ("a", "b")

META_FIELDS = (
    "clip_similarity",
    "watermark_prob",
    "unsafe_prob",
    "aesthetic_score",
    "width",
    "height",
    "caption_length",
)


class DataError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """A set of colored shapes on a grid; captions are a deterministic,
    injective function of the scene."""

    items: tuple  # ((shape, color, cell_index), ...) sorted by cell
    language: str = "a"
    template_id: int = 0

    def __post_init__(self):
        if not self.items:
            raise DataError("scene needs at least one shape")
        cells = [it[2] for it in self.items]
        if len(set(cells)) != len(cells):
            raise DataError(f"overlapping grid cells: {cells}")
        for shape, color, cell in self.items:
            if shape not in SHAPES:
                raise DataError(f"unknown shape {shape!r}")
            if color not in COLORS:
                raise DataError(f"unknown color {color!r}")
            if not 0 <= cell < GRID * GRID:
                raise DataError(f"cell index {cell} out of range")
        if self.language not in LANGUAGES:
            raise DataError(f"unknown language {self.language!r}")
        object.__setattr__(self, "items", tuple(sorted(self.items, key=lambda it: it[2])))

    def to_json(self) -> str:
        return json.dumps(
            {"items": [list(it) for it in self.items], "language": self.language,
             "template_id": self.template_id},
            sort_keys=True,
        )

    @staticmethod
    def from_json(s: str) -> "SceneSpec":
        d = json.loads(s)
        return SceneSpec(
            items=tuple((it[0], it[1], it[2]) for it in d["items"]),
            language=d["language"],
            template_id=d.get("template_id", 0),
        )


def render_caption(spec: SceneSpec) -> str:
    if spec.language == "a":
        parts = [f"a {color} {shape} at {CELLS[cell]}" for shape, color, cell in spec.items]
    else:
        # language b: location fronted, adjective postposed
        parts = [f"at {CELLS[cell]} a {shape} {color}" for shape, color, cell in spec.items]
    return " and ".join(parts) + "."


# every part of the scene spec renders into the pixels, language included,
# so captions (which depend on the language) stay a function of the image
_BACKGROUND = {"a": 0.05, "b": 0.18}


def render_image(spec: SceneSpec, resolution: int) -> np.ndarray:
    """Rasterize shapes on a language-shaded background, [R, R, 3] in [0, 1]."""
    if resolution < GRID * 4:
        raise DataError(f"resolution {resolution} too small for a {GRID}x{GRID} grid")
    img = np.full((resolution, resolution, 3), _BACKGROUND[spec.language], dtype=np.float32)
    cell_px = resolution // GRID
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    for shape, color, cell in spec.items:
        row, col = divmod(cell, GRID)
        cy = row * cell_px + cell_px / 2.0 - 0.5
        cx = col * cell_px + cell_px / 2.0 - 0.5
        r = 0.38 * cell_px
        if shape == "circle":
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        elif shape == "square":
            mask = (np.abs(xs - cx) <= r * 0.9) & (np.abs(ys - cy) <= r * 0.9)
        else:  # triangle pointing up
            rel_y = ys - (cy - r)
            half = np.clip(rel_y / (2.0 * r), 0.0, 1.0) * r
            mask = (rel_y >= 0) & (ys <= cy + r) & (np.abs(xs - cx) <= half)
        img[mask] = np.asarray(COLORS[color], dtype=np.float32)
    return img


@dataclass
class PairRecord:
    spec: SceneSpec
    caption: str
    meta: dict = field(default_factory=dict)

    @property
    def language(self) -> str:
        return self.spec.language


def _spec_seed(spec: SceneSpec) -> int:
    digest = hashlib.sha256(spec.to_json().encode()).digest()
    return int.from_bytes(digest[:8], "little")


def generate_pair(spec: SceneSpec, resolution: int) -> PairRecord:
    """Deterministic record: caption from the template, synthetic quality
    scores from a distribution seeded by the scene itself."""
    caption = render_caption(spec)
    rng = np.random.default_rng(_spec_seed(spec))
    u = rng.random(4)
    meta = {
        "clip_similarity": 0.22 + 0.18 * u[0],
        "watermark_prob": 0.05 * u[1],
        "unsafe_prob": 0.02 * u[2],
        "aesthetic_score": 4.0 + 2.0 * u[3],
        "width": float(resolution),
        "height": float(resolution),
        "caption_length": float(len(caption)),
    }
    return PairRecord(spec=spec, caption=caption, meta=meta)


def all_scene_items(max_shapes: int = 2) -> list:
    """Every distinct item tuple with up to max_shapes shapes in distinct cells."""
    singles = [
        ((shape, color, cell),)
        for cell in range(GRID * GRID)
        for shape in SHAPES
        for color in COLORS
    ]
    out = list(singles)
    if max_shapes >= 2:
        import itertools

        for c1, c2 in itertools.combinations(range(GRID * GRID), 2):
            for s1 in SHAPES:
                for k1 in COLORS:
                    for s2 in SHAPES:
                        for k2 in COLORS:
                            out.append(((s1, k1, c1), (s2, k2, c2)))
    return out


def sample_scenes(rng: np.random.Generator, n: int, max_shapes: int = 2) -> list:
    """n distinct scenes with languages assigned at random."""
    universe = all_scene_items(max_shapes)
    if n > len(universe):
        raise DataError(f"requested {n} scenes, universe holds {len(universe)}")
    idx = rng.choice(len(universe), size=n, replace=False)
    langs = rng.integers(0, len(LANGUAGES), size=n)
    return [SceneSpec(items=universe[i], language=LANGUAGES[l]) for i, l in zip(idx, langs)]


def generate_dataset(
    n_train: int,
    n_eval: int,
    seed: int,
    resolution: int,
    max_shapes: int = 2,
    eval_single_fraction: float = 0.25,
):
    """Disjoint train/eval records; distinct scenes give distinct captions
    and distinct rasters, so retrieval ground truth is well-defined.

    The eval split is stratified to hold a quota of single-shape scenes
    (captioning is scored on those), leaving at least half of the
    single-shape universe for training.
    """
    rng = np.random.default_rng(seed)
    universe = all_scene_items(max_shapes)
    singles = [it for it in universe if len(it) == 1]
    multis = [it for it in universe if len(it) > 1]
    if n_train + n_eval > len(universe):
        raise DataError(f"requested {n_train + n_eval} scenes, universe holds {len(universe)}")
    rng.shuffle(singles)
    rng.shuffle(multis)
    k_eval_single = min(int(round(n_eval * eval_single_fraction)), len(singles) // 2, n_eval)
    eval_items = singles[:k_eval_single] + multis[: n_eval - k_eval_single]
    pool = singles[k_eval_single:] + multis[n_eval - k_eval_single :]
    order = rng.permutation(len(pool))[:n_train]
    train_items = [pool[i] for i in order]
    rng.shuffle(eval_items)

    def build(items):
        langs = rng.integers(0, len(LANGUAGES), size=len(items))
        return [
            generate_pair(SceneSpec(items=it, language=LANGUAGES[l]), resolution)
            for it, l in zip(items, langs)
        ]

    return build(train_items), build(eval_items)


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------


def tokenize(text: str) -> list:
    """UTF-8 bytes as ids 0..255 wrapped in BOS/EOS."""
    return [BOS_ID] + list(text.encode("utf-8")) + [EOS_ID]


def detokenize(ids: Sequence[int]) -> str:
    body = bytes(i for i in ids if 0 <= i < 256)
    return body.decode("utf-8", errors="strict")


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

# evaluated in this order; the first violated factor names the reject reason
STAGE1_FACTORS = META_FIELDS[:4] + ("resolution", "caption_length")

STAGE2_RULES = (
    "caption_length",
    "completeness",
    "readability",
    "gibberish",
    "boilerplate",
    "offensive",
    "placeholder",
    "source_code",
)

DEFAULT_BOILERPLATE = ("menu", "error 404", "page not found", "click here", "add to cart")
DEFAULT_OFFENSIVE = ("fuck", "shit")
DEFAULT_PLACEHOLDER = ("lorem ipsum", "placeholder", "your text here", "image of unknown")
DEFAULT_SOURCE_CODE = ("{", "</", "http://", "https://", "def ", "function(", "=>", ";")


@dataclass(frozen=True)
class FilterThresholds:
    clip_similarity: tuple = (0.15, 1.0)
    watermark_prob: tuple = (0.0, 0.5)
    unsafe_prob: tuple = (0.0, 0.2)
    aesthetic_score: tuple = (3.0, 10.0)
    resolution: tuple = (16.0, 8192.0)       # applies to min(width, height)
    caption_length: tuple = (3.0, 256.0)
    # stage-2 caption rules; the length bounds must be within the stage-1 ones
    stage2_caption_length: tuple = (8.0, 200.0)
    readability_min_alpha: float = 0.8
    gibberish_max_repeat: float = 0.5
    boilerplate: tuple = DEFAULT_BOILERPLATE
    offensive: tuple = DEFAULT_OFFENSIVE
    placeholder: tuple = DEFAULT_PLACEHOLDER
    source_code: tuple = DEFAULT_SOURCE_CODE

    def __post_init__(self):
        lo1, hi1 = self.caption_length
        lo2, hi2 = self.stage2_caption_length
        if lo2 < lo1 or hi2 > hi1:
            raise DataError(
                "stage-2 caption length bounds must be within the stage-1 bounds "
                f"(got {self.stage2_caption_length} vs {self.caption_length})"
            )


@dataclass
class FilterDecision:
    keep: bool
    reason: Optional[str] = None


class FilterOrderError(ValueError):
    """Stage-2 filter applied to a record that fails stage 1."""


def _factor_value(record: PairRecord, factor: str) -> float:
    try:
        if factor == "resolution":
            return min(record.meta["width"], record.meta["height"])
        return record.meta[factor]
    except KeyError as e:
        raise DataError(f"missing meta field {e.args[0]!r}") from None


def filter_stage1(record: PairRecord, thresholds: FilterThresholds) -> FilterDecision:
    """Keep iff all six factors fall inside their bounds; extreme points go."""
    for factor in STAGE1_FACTORS:
        lo, hi = getattr(thresholds, factor)
        v = _factor_value(record, factor)
        if not (lo <= v <= hi):
            return FilterDecision(False, factor)
    return FilterDecision(True)


def _alpha_fraction(caption: str) -> float:
    if not caption:
        return 0.0
    good = sum(1 for c in caption if c.isalpha() or c == " ")
    return good / len(caption)


def _repeat_fraction(caption: str) -> float:
    words = caption.lower().split()
    if len(words) < 4:
        return 0.0
    return 1.0 - len(set(words)) / len(words)


def filter_stage2(
    record: PairRecord,
    thresholds: FilterThresholds,
    on_stage1_fail: str = "raise",
) -> FilterDecision:
    """Caption-quality rules on top of stage 1 (strictly stricter)."""
    first = filter_stage1(record, thresholds)
    if not first.keep:
        if on_stage1_fail == "raise":
            raise FilterOrderError(f"record fails stage 1 on {first.reason!r}")
        return FilterDecision(False, f"stage1:{first.reason}")
    caption = record.caption
    lowered = caption.lower()
    for rule in STAGE2_RULES:
        if rule == "caption_length":
            lo, hi = thresholds.stage2_caption_length
            if not (lo <= len(caption) <= hi):
                return FilterDecision(False, rule)
        elif rule == "completeness":
            if not caption.rstrip().endswith((".", "!", "?")):
                return FilterDecision(False, rule)
        elif rule == "readability":
            if _alpha_fraction(caption) < thresholds.readability_min_alpha:
                return FilterDecision(False, rule)
        elif rule == "gibberish":
            if _repeat_fraction(caption) > thresholds.gibberish_max_repeat:
                return FilterDecision(False, rule)
        else:
            patterns = getattr(thresholds, rule)
            if any(p in lowered for p in patterns):
                return FilterDecision(False, rule)
    return FilterDecision(True)


# ---------------------------------------------------------------------------
# Deduplication
# ---------------------------------------------------------------------------

HASH_RESOLUTION = 32


def image_hash(spec: SceneSpec, resolution: int = HASH_RESOLUTION) -> str:
    raster = render_image(spec, resolution)
    return hashlib.sha256(raster.tobytes()).hexdigest()


def dedup(records: Iterable[PairRecord], eval_image_hashes: set):
    """Drop records whose canonical raster hash collides with the eval set."""
    kept = []
    removed = 0
    for rec in records:
        if image_hash(rec.spec) in eval_image_hashes:
            removed += 1
        else:
            kept.append(rec)
    return kept, {"removed": removed, "kept": len(kept)}


# ---------------------------------------------------------------------------
# Corpus file format: length-prefixed records
#   u32 spec-JSON length | spec JSON | u32 caption length | caption UTF-8 |
#   7 little-endian float64 meta values (META_FIELDS order)
# ---------------------------------------------------------------------------


def write_corpus(records: Sequence[PairRecord], path) -> None:
    with open(path, "wb") as f:
        for rec in records:
            spec_bytes = rec.spec.to_json().encode("utf-8")
            cap_bytes = rec.caption.encode("utf-8")
            f.write(struct.pack("<I", len(spec_bytes)))
            f.write(spec_bytes)
            f.write(struct.pack("<I", len(cap_bytes)))
            f.write(cap_bytes)
            f.write(struct.pack("<7d", *(rec.meta[k] for k in META_FIELDS)))


def read_corpus(path) -> list:
    records = []
    with open(path, "rb") as f:
        blob = f.read()
    off = 0
    total = len(blob)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > total:
            raise CorpusFormatError(f"truncated corpus record at byte {off}")
        out = blob[off : off + n]
        off += n
        return out

    while off < total:
        (spec_len,) = struct.unpack("<I", take(4))
        spec = SceneSpec.from_json(take(spec_len).decode("utf-8"))
        (cap_len,) = struct.unpack("<I", take(4))
        caption = take(cap_len).decode("utf-8")
        meta_vals = struct.unpack("<7d", take(56))
        records.append(PairRecord(spec=spec, caption=caption, meta=dict(zip(META_FIELDS, meta_vals))))
    return records
