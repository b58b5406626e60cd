"""Command-line surface: train / eval / filter / gen-data / count /
gradcheck / inspect. Exit codes: 0 success, 1 usage error, 2 runtime
failure (diagnostic on stderr)."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, config as config_mod, data as data_mod
from . import evaluate as eval_mod
from . import trainer as trainer_mod
from . import verification, vit


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vlalign", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one alignment stage")
    t.add_argument("--stage", required=True, choices=trainer_mod.STAGES)
    t.add_argument("--config", required=True)
    t.add_argument("--init-checkpoint", default=None)
    t.add_argument("--out", default=None, help="override the config output dir")

    e = sub.add_parser("eval", help="evaluation protocols")
    e.add_argument("task", choices=["retrieval", "classify", "caption", "linear-probe", "video"])
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True)
    e.add_argument("--mode", default="C", choices=["C", "G"])
    e.add_argument("--data", default=None, help="corpus file (defaults to config eval corpus)")
    e.add_argument("--out", default=None, help="write the JSON report here")
    e.add_argument("--beam-size", type=int, default=1)
    e.add_argument("--frames", type=int, default=4)

    f = sub.add_parser("filter", help="apply the stage-1/2 data filters")
    f.add_argument("--stage", required=True, choices=["1", "2"])
    f.add_argument("--in", dest="input", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--report", default=None)

    g = sub.add_parser("gen-data", help="generate a synthetic pair corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--eval-n", type=int, default=0)
    g.add_argument("--eval-out", default=None)
    g.add_argument("--resolution", type=int, default=32)
    g.add_argument("--max-shapes", type=int, default=2)

    c = sub.add_parser("count", help="parameter/FLOP calculators for the search variants")
    c.add_argument("--variant", required=True, choices=sorted(vit.SEARCH_VARIANTS))
    c.add_argument("--resolution", type=int, default=224)

    gc = sub.add_parser("gradcheck", help="finite-difference verification suites")
    gc.add_argument("--suite", default="quick", choices=["quick", "full"])

    i = sub.add_parser("inspect", help="describe a checkpoint file")
    i.add_argument("--checkpoint", required=True)
    return p


def _write_manifest(out_dir: Path, args_list, cfg: config_mod.RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "argv": list(args_list),
        "seed": cfg.seed,
        "config_digest": cfg.digest().hex(),
        "config": cfg.raw,
        "versions": {"vlalign": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _load_corpus_or_die(path) -> list:
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    return data_mod.read_corpus(path)


def _cmd_train(args, argv) -> int:
    cfg = config_mod.load_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    if args.stage in ("2", "3", "retrieval-ft") and args.init_checkpoint is None:
        raise RuntimeError(
            f"stage {args.stage} requires stage-{'1' if args.stage == '2' else 'prior'} weights: "
            "pass --init-checkpoint"
        )
    assembly = cfg.build_assembly()
    if args.init_checkpoint is not None:
        checkpoint.load_checkpoint(args.init_checkpoint, assembly.params)
    corpus = _load_corpus_or_die(cfg.data.get("corpus"))
    plan = trainer_mod.build_stage_plan(args.stage, assembly, cfg.stage_overrides(args.stage))
    result = trainer_mod.run_stage(plan, corpus, assembly, out_dir)
    _write_manifest(out_dir, argv, cfg)
    last = result["records"][-1] if result["records"] else {}
    print(f"stage {args.stage}: {plan.total_steps} steps, final loss {last.get('loss')}")
    print(f"checkpoint: {result['checkpoint']}")
    print(f"metrics: {result['metrics']}")
    return 0


def _load_eval_assembly(args):
    cfg = config_mod.load_config(args.config)
    assembly = cfg.build_assembly()
    checkpoint.load_checkpoint(args.checkpoint, assembly.params)
    records = _load_corpus_or_die(args.data or cfg.data.get("eval_corpus") or cfg.data.get("corpus"))
    resolution = int(cfg.data.get("resolution", assembly.vit_cfg.image_size))
    return cfg, assembly, records, resolution


def _emit_report(report, out_path) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    if out_path:
        Path(out_path).write_text(text)
    print(text)


def _cmd_eval(args, argv) -> int:
    cfg, assembly, records, resolution = _load_eval_assembly(args)
    images = np.stack([data_mod.render_image(r.spec, resolution) for r in records])
    ids = [r.spec.to_json() for r in records]

    if args.task == "retrieval":
        img_set = eval_mod.EmbeddingSet(ids, eval_mod.embed_image(images, args.mode, assembly), "image")
        txt_set = eval_mod.EmbeddingSet(ids, eval_mod.embed_texts([r.caption for r in records], assembly), "text")
        result = eval_mod.retrieval_recall(img_set, txt_set, ks=(1, 5, 10))
        _emit_report(eval_mod.recall_report(result), args.out)
        return 0

    if args.task == "classify":
        singles = [r for r in records if len(r.spec.items) == 1]
        if not singles:
            raise RuntimeError("classification needs single-shape scenes in the corpus")
        imgs = np.stack([data_mod.render_image(r.spec, resolution) for r in singles])
        class_names = [f"{color} {shape}" for shape in data_mod.SHAPES for color in data_mod.COLORS]
        truth = [f"{r.spec.items[0][1]} {r.spec.items[0][0]}" for r in singles]
        templates = ["a {} at top left.", "a {} at bottom right."]
        preds, _, _ = eval_mod.zero_shot_classify(
            eval_mod.embed_image(imgs, args.mode, assembly),
            class_names, templates, lambda ts: eval_mod.embed_texts(ts, assembly),
        )
        acc = float(np.mean([class_names[p] == t for p, t in zip(preds, truth)]))
        _emit_report({"metric": "zero_shot_accuracy", "value": acc, "n": len(singles)}, args.out)
        return 0

    if args.task == "caption":
        singles = [r for r in records if len(r.spec.items) == 1]
        imgs = [data_mod.render_image(r.spec, resolution) for r in singles]
        if args.beam_size > 1:
            caps = [eval_mod.caption_generate(im, assembly, decode="beam", beam_size=args.beam_size)
                    for im in imgs]
        else:
            caps = eval_mod.caption_generate_batch(imgs, assembly)
        exact = float(np.mean([c == r.caption for c, r in zip(caps, singles)])) if singles else 0.0
        _emit_report({"metric": "caption_exact_match", "value": exact, "n": len(singles),
                      "samples": [{"truth": r.caption, "generated": c}
                                  for r, c in list(zip(singles, caps))[:5]]}, args.out)
        return 0

    if args.task == "linear-probe":
        singles = [r for r in records if len(r.spec.items) == 1]
        if len(singles) < 8:
            raise RuntimeError("linear probe needs at least 8 single-shape scenes")
        imgs = np.stack([data_mod.render_image(r.spec, resolution) for r in singles])
        labels = np.array([data_mod.SHAPES.index(r.spec.items[0][0]) for r in singles])
        feats = eval_mod.probe_features(assembly, imgs)
        half = len(singles) // 2
        result = eval_mod.linear_probe(feats[:half], labels[:half], len(data_mod.SHAPES),
                                       eval_features=feats[half:], eval_labels=labels[half:])
        _emit_report({"metric": "linear_probe_accuracy", "value": result.accuracy,
                      "feature_dim": result.feature_dim}, args.out)
        return 0

    if args.task == "video":
        vecs = []
        for r in records:
            img = data_mod.render_image(r.spec, resolution)
            frames = [np.roll(img, s, axis=1) for s in range(args.frames)]
            vecs.append(eval_mod.video_embed(frames, args.mode, assembly))
        img_set = eval_mod.EmbeddingSet(ids, np.stack(vecs), "video")
        txt_set = eval_mod.EmbeddingSet(ids, eval_mod.embed_texts([r.caption for r in records], assembly), "text")
        result = eval_mod.retrieval_recall(img_set, txt_set, ks=(1, 5, 10))
        _emit_report(eval_mod.recall_report(result, metric="video_recall"), args.out)
        return 0
    raise RuntimeError(f"unknown eval task {args.task}")


def _cmd_filter(args) -> int:
    records = _load_corpus_or_die(args.input)
    thresholds = data_mod.FilterThresholds()
    kept = []
    rejects: dict[str, int] = {}
    for rec in records:
        if args.stage == "1":
            decision = data_mod.filter_stage1(rec, thresholds)
        else:
            decision = data_mod.filter_stage2(rec, thresholds, on_stage1_fail="reject")
        if decision.keep:
            kept.append(rec)
        else:
            rejects[decision.reason] = rejects.get(decision.reason, 0) + 1
    data_mod.write_corpus(kept, args.out)
    report = {"input_count": len(records), "kept": len(kept), "rejects": rejects}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_gen_data(args) -> int:
    train, heldout = data_mod.generate_dataset(
        args.n, args.eval_n, seed=args.seed, resolution=args.resolution, max_shapes=args.max_shapes
    )
    data_mod.write_corpus(train, args.out)
    print(f"wrote {len(train)} records to {args.out}")
    if args.eval_n:
        if not args.eval_out:
            raise RuntimeError("--eval-out required when --eval-n > 0")
        data_mod.write_corpus(heldout, args.eval_out)
        print(f"wrote {len(heldout)} held-out records to {args.eval_out}")
    return 0


def _cmd_count(args) -> int:
    cfg = vit.SEARCH_VARIANTS[args.variant]
    params = vit.count_params(cfg)
    gflops = vit.estimate_flops(cfg, args.resolution)
    print(f"variant {args.variant}: width {cfg.width} depth {cfg.depth} "
          f"mlp {cfg.mlp_dim} heads {cfg.num_heads}")
    print(f"params: {params} ({params / 1e6:.0f}M)")
    print(f"flops: {gflops:.1f} GFLOPs at {args.resolution}x{args.resolution} "
          f"(multiply-accumulate convention)")
    return 0


def _cmd_gradcheck(args) -> int:
    entries = verification.run_suite(args.suite)
    failed = False
    for e in entries:
        status = "ok" if e.ok else "FAIL"
        print(f"{e.name:24s} max rel err {e.max_rel_error:.3e}  tol {e.tolerance:.0e}  "
              f"[{e.instances} instances] {status}")
        failed |= not e.ok
    if failed:
        print("gradcheck FAILED", file=sys.stderr)
        return 2
    return 0


def _cmd_inspect(args) -> int:
    loaded = checkpoint.read_checkpoint(args.checkpoint)
    print(f"config digest: {loaded['digest'].hex()}")
    print(f"tensors: {len(loaded['tensors'])}")
    total = 0
    for name, arr in loaded["tensors"].items():
        total += arr.size
        print(f"  {name:40s} {str(arr.dtype):8s} {arr.shape}")
    print(f"total parameters: {total}")
    return 0


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        if args.command == "train":
            return _cmd_train(args, argv)
        if args.command == "eval":
            return _cmd_eval(args, argv)
        if args.command == "filter":
            return _cmd_filter(args)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "count":
            return _cmd_count(args)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "inspect":
            return _cmd_inspect(args)
        raise RuntimeError(f"unhandled command {args.command}")
    except Exception as e:  # runtime failure contract: diagnostic + exit 2
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
