"""End-to-end desk-scale alignment run.

Generates a synthetic corpus, pre-trains the language backbone on captions,
runs contrastive stage 1, generative stage 2, and the projector SFT stage,
and reports held-out retrieval / captioning / chat quality after each step.

Usage: python scripts/run_toy_alignment.py [--preset micro] [--out runs/toy]
       [--scale 1.0] (scales every stage's step count)
"""

import argparse
import json
import os
import sys
import time
from pathlib import Path

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from vlalign import config as config_mod
from vlalign import data as data_mod
from vlalign import evaluate as eval_mod
from vlalign import trainer as trainer_mod


def retrieval_r1(assembly, records, resolution, mode):
    images = np.stack([data_mod.render_image(r.spec, resolution) for r in records])
    ids = [r.spec.to_json() for r in records]
    img = eval_mod.EmbeddingSet(ids, eval_mod.embed_image(images, mode, assembly), "image")
    txt = eval_mod.EmbeddingSet(ids, eval_mod.embed_texts([r.caption for r in records], assembly), "text")
    rec = eval_mod.retrieval_recall(img, txt, ks=(1, 5))
    return rec["image_to_text"][1], rec["text_to_image"][1]


def caption_exact_match(assembly, records, resolution):
    singles = [r for r in records if len(r.spec.items) == 1]
    if not singles:
        return float("nan"), 0
    imgs = [data_mod.render_image(r.spec, resolution) for r in singles]
    caps = eval_mod.caption_generate_batch(imgs, assembly)
    hits = sum(c == r.caption for c, r in zip(caps, singles))
    return hits / len(singles), len(singles)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="micro")
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--scale", type=float, default=1.0, help="multiply stage step counts")
    ap.add_argument("--skip-sft", action="store_true")
    args = ap.parse_args()

    cfg = config_mod.default_config(args.preset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolution = int(cfg.data["resolution"])

    t0 = time.time()
    train, heldout = data_mod.generate_dataset(
        cfg.data["train_size"], cfg.data["eval_size"],
        seed=cfg.data["seed"], resolution=resolution, max_shapes=cfg.data["max_shapes"],
    )
    print(f"[data] {len(train)} train / {len(heldout)} held-out pairs "
          f"({sum(len(r.spec.items) == 1 for r in heldout)} single-shape held-out)")

    assembly = cfg.build_assembly()

    def plan_for(stage):
        ov = cfg.stage_overrides(stage)
        if args.scale != 1.0:
            ov["total_steps"] = max(1, int(ov.get("total_steps",
                trainer_mod._STAGE_DEFAULTS[stage]["total_steps"]) * args.scale))
        return trainer_mod.build_stage_plan(stage, assembly, ov)

    for stage in ["lm-pretrain", "1", "2"] + ([] if args.skip_sft else ["3"]):
        plan = plan_for(stage)
        t = time.time()
        result = trainer_mod.run_stage(plan, train, assembly, out)
        last = result["records"][-1]
        print(f"[stage {stage}] {plan.total_steps} steps in {time.time()-t:.0f}s, "
              f"final loss {last['loss']:.4f}")
        if stage == "1":
            i2t, t2i = retrieval_r1(assembly, heldout, resolution, "C")
            print(f"  held-out R@1 mode C: image->text {i2t:.1%}, text->image {t2i:.1%}")
        if stage == "2":
            for mode in ("C", "G"):
                i2t, t2i = retrieval_r1(assembly, heldout, resolution, mode)
                print(f"  held-out R@1 mode {mode}: image->text {i2t:.1%}, text->image {t2i:.1%}")
            em, n = caption_exact_match(assembly, heldout, resolution)
            print(f"  caption exact match on {n} single-shape scenes: {em:.1%}")

    summary = {"elapsed_s": time.time() - t0}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"[done] total {summary['elapsed_s']:.0f}s; artifacts in {out}")


if __name__ == "__main__":
    main()
