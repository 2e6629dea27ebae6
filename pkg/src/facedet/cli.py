"""Command-line front end: synth, pretrain, mine, finetune, detect, eval,
ablate, gradcheck.  Flags override config-file values, which override the
built-in defaults.  Exit codes: 0 success, 1 validation error, 2 runtime
failure."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_cfg(args):
    from .pipeline import PipelineConfig, load_config

    if getattr(args, "config", None):
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = PipelineConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _load_dataset(path):
    from .data import load_synthetic

    if not os.path.isdir(path):
        raise UsageError(f"dataset directory not found: {path}")
    return load_synthetic(path)


def _cmd_synth(args) -> int:
    from .data import gen_synthetic, save_synthetic

    cfg = _load_cfg(args)
    synth = cfg.synth
    if args.images is not None:
        synth = dataclasses.replace(synth, num_images=args.images)
    dataset = gen_synthetic(synth, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    save_synthetic(args.out, dataset)
    print(f"wrote {len(dataset)} images to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    from .pipeline import FaceDetector, TrainState, stage_pretrain

    cfg = _load_cfg(args)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, trainer=dataclasses.replace(
            cfg.trainer, pretrain_iterations=args.iterations))
    dataset = _load_dataset(args.data)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    model = FaceDetector(cfg, rng)
    stage_pretrain(cfg, dataset, rng, model=model, checkpoint_path=args.out, state=state)
    print(f"pretrained {cfg.trainer.pretrain_iterations} iterations; "
          f"final loss {state.losses[-1]:.4f}; weights at {args.out}")
    return 0


def _build_model(args, cfg):
    from .pipeline import FaceDetector

    model = FaceDetector(cfg, np.random.default_rng(cfg.seed))
    if not os.path.exists(args.weights):
        raise UsageError(f"weight file not found: {args.weights}")
    model.load(args.weights)
    return model


def _cmd_mine(args) -> int:
    from .pipeline import stage_mine

    cfg = _load_cfg(args)
    dataset = _load_dataset(args.data)
    model = _build_model(args, cfg)
    store = stage_mine(model, dataset, store_path=args.out)
    total = sum(len(v) for v in store.values())
    print(f"harvested {total} hard negatives from {len(dataset)} images -> {args.out}")
    return 0


def _cmd_finetune(args) -> int:
    from .pipeline import TrainState, stage_finetune
    from .sampling import load_hard_negatives

    cfg = _load_cfg(args)
    if args.iterations is not None:
        cfg = dataclasses.replace(cfg, trainer=dataclasses.replace(
            cfg.trainer, finetune_iterations=args.iterations))
    dataset = _load_dataset(args.data)
    model = _build_model(args, cfg)
    hard_store = None
    if args.hard_negatives:
        if not os.path.exists(args.hard_negatives):
            raise UsageError(f"hard-negative store not found: {args.hard_negatives}")
        hard_store = load_hard_negatives(args.hard_negatives)
    rng = np.random.default_rng(cfg.seed + 1)
    state = TrainState()
    stage_finetune(model, dataset, hard_store, rng, checkpoint_path=args.out, state=state)
    print(f"finetuned {cfg.trainer.finetune_iterations} iterations; "
          f"final loss {state.losses[-1]:.4f}; weights at {args.out}")
    return 0


def _cmd_detect(args) -> int:
    from .fddb_eval import box_to_ellipse, format_detections
    from .geometry import ScoredRegion
    from .pipeline import detect_dataset

    cfg = _load_cfg(args)
    dataset = _load_dataset(args.data)
    model = _build_model(args, cfg)
    per_image = detect_dataset(model, dataset, export=args.export)
    if args.ellipse:
        per_image = [
            (name, [ScoredRegion(box_to_ellipse(d.region), d.score) for d in dets])
            for name, dets in per_image
        ]
    text = format_detections(per_image)
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)
    total = sum(len(d) for _, d in per_image)
    print(f"wrote {total} detections over {len(per_image)} images to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .data import load_synthetic, parse_fddb
    from .fddb_eval import emit_report, evaluate, parse_detections

    with open(args.detections, encoding="utf-8") as f:
        per_image = parse_detections(f.read())
    if os.path.isdir(args.annotations):
        records = [rec for rec, _ in load_synthetic(args.annotations)]
    else:
        with open(args.annotations, encoding="utf-8") as f:
            records = parse_fddb(f.read())
    by_id = {r.image_id: r for r in records}
    missing = [name for name, _ in per_image if name not in by_id]
    if missing:
        raise UsageError(f"detections name images absent from annotations: {missing[:5]}")
    pairs = [(dets, list(by_id[name].annotations)) for name, dets in per_image]
    report = evaluate(pairs)
    csv_path, svg_path = emit_report(report, args.out)
    print(f"evaluated {report.total_faces} faces; report at {csv_path} and {svg_path}")
    return 0


def _cmd_ablate(args) -> int:
    from .pipeline import TABLE2_ROWS, run_ablation

    cfg = _load_cfg(args)
    rows = TABLE2_ROWS
    if args.rows:
        wanted = {int(x) for x in args.rows.split(",")}
        unknown = wanted - {r.id for r in TABLE2_ROWS}
        if unknown:
            raise UsageError(f"unknown ablation row ids: {sorted(unknown)}")
        rows = tuple(r for r in TABLE2_ROWS if r.id in wanted)
    pretrain_set = _load_dataset(args.pretrain_data)
    train_set = _load_dataset(args.train_data)
    test_set = _load_dataset(args.test_data)
    os.makedirs(args.out, exist_ok=True)
    results = run_ablation(rows, cfg, pretrain_set, train_set, test_set, args.out)
    for row_id in sorted(results):
        rep = results[row_id].report
        print(f"row {row_id}: discrete y={rep.discrete.y_at_fp(len(test_set)):.3f} "
              f"at <=1 FP/image")
    return 0


def _cmd_gradcheck(args) -> int:
    from . import tensor as T
    from .featconcat import ConcatConfig, FeatureConcatHead
    from .net import Backbone, BackboneSpec, Linear, finite_diff_check, softmax_ce_loss
    from .geometry import BBox
    from .tensor import Tensor

    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    spec = BackboneSpec(channels=(4, 6, 8), downsamples=(4, 2, 2))
    backbone = Backbone(spec, 1, rng)
    cfg = ConcatConfig(taps=(0, 1, 2), pooled=3, target_norm=4700.0, output_channels=6)
    head = FeatureConcatHead(cfg, list(spec.channels), rng)
    fc = Linear(6 * 9, 2, rng)
    image = Tensor(rng.uniform(0.1, 1.0, (1, 1, 32, 32)))
    rois = [BBox(4.0, 4.0, 24.0, 20.0), BBox(10.0, 8.0, 30.0, 30.0)]
    labels = np.array([0, 1])

    def loss_fn():
        taps = backbone(image)
        feats = head(taps, rois)
        logits = fc(T.reshape(feats, (2, -1)))
        return softmax_ce_loss(logits, labels)

    params = {}
    for prefix, mod in (("backbone", backbone), ("concat", head), ("fc", fc)):
        for k, v in mod.parameters().items():
            params[f"{prefix}.{k}"] = v
    report = finite_diff_check(loss_fn, params, eps=args.eps, rng=rng)
    print(report.summary())
    return 0 if report.max_error < 1e-4 else 2


def build_parser() -> _Parser:
    p = _Parser(prog="facedet", description="Desk-scale two-stage face detector")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="pipeline JSON config (defaults used otherwise)")
        sp.add_argument("--seed", type=int, help="override the config seed")

    sp = sub.add_parser("synth", help="generate and persist a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="output dataset directory")
    sp.add_argument("--images", type=int, help="override image count")
    sp.set_defaults(func=_cmd_synth)

    sp = sub.add_parser("pretrain", help="train a fresh model at the fixed scale")
    common(sp)
    sp.add_argument("--data", required=True, help="synthetic dataset directory")
    sp.add_argument("--out", required=True, help="output weight file")
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=_cmd_pretrain)

    sp = sub.add_parser("mine", help="harvest hard negatives from a trained model")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="hard-negative JSONL store")
    sp.set_defaults(func=_cmd_mine)

    sp = sub.add_parser("finetune", help="finetune with multi-scale and hard negatives")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--hard-negatives", help="JSONL store from `mine`")
    sp.add_argument("--out", required=True, help="output weight file")
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=_cmd_finetune)

    sp = sub.add_parser("detect", help="run detection over a dataset")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="detection text file")
    sp.add_argument("--export", action="store_true",
                    help="emit every detection above the export floor (default 0.001)")
    sp.add_argument("--ellipse", action="store_true",
                    help="convert boxes to IoU-maximizing ellipses")
    sp.set_defaults(func=_cmd_detect)

    sp = sub.add_parser("eval", help="score detections against annotations")
    common(sp, config=False)
    sp.add_argument("--detections", required=True)
    sp.add_argument("--annotations", required=True,
                    help="FDDB ellipse list file or synthetic dataset directory")
    sp.add_argument("--out", required=True, help="report directory (CSV + SVG)")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("ablate", help="run the 7-row ablation grid")
    common(sp)
    sp.add_argument("--pretrain-data", required=True)
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--test-data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rows", help="comma-separated row ids (default all)")
    sp.set_defaults(func=_cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(sp, config=False)
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.set_defaults(func=_cmd_gradcheck)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
