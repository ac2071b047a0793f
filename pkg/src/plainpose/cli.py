"""Command-line entry point: ``plainpose {train,eval,distill,cost,infer,synth}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return h, w


def _bbox(text: str) -> tuple[float, float, float, float]:
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("bbox is x,y,w,h")
    return tuple(float(p) for p in parts)


def _model_config(args):
    from .config import load_model_config, preset

    if getattr(args, "config", None):
        cfg = load_model_config(args.config)
    else:
        cfg = preset(args.preset)
    enc = cfg.encoder
    changes = {}
    if getattr(args, "input", None):
        changes["input_hw"] = args.input
    if getattr(args, "stride", None):
        changes["patch_stride"] = args.stride
    if getattr(args, "attention", None):
        changes["attention"] = args.attention
    if getattr(args, "window", None):
        changes["window_hw"] = args.window
    if changes:
        from dataclasses import replace

        cfg = replace(cfg, encoder=replace(enc, **changes))
    return cfg


def _emit(obj, text: str, as_json: bool, out=None) -> None:
    if out:
        Path(out).write_text(json.dumps(obj, indent=1))
    print(json.dumps(obj, indent=1) if as_json else text)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_cost(args) -> int:
    from .cost import cost_report, training_flops

    cfg = _model_config(args)
    r = cost_report(cfg, cfg.encoder.input_hw, args.batch, include_heads=not args.no_heads)
    obj, text = r.to_dict(), r.text()
    if args.freeze:
        t = training_flops(cfg, args.freeze)
        obj["training"] = {"freeze": args.freeze, **t}
        text += (
            f"\ntrain GFLOPs/img (freeze {args.freeze})  {t['total'] / 1e9:10.2f}"
            f"\ntrainable params             {t['trainable_params'] / 1e6:10.2f} M"
        )
    _emit(obj, text, args.json)
    return 0


def _datasets(args, cfg):
    from .datasets import CocoKeypointDataset
    from .train import SyntheticDataset

    hw = cfg.encoder.input_hw
    out = {}
    for spec in args.data:
        name, _, src = spec.rpartition("=")
        if src == "synthetic":
            schema = name or args.schema
            out[schema] = SyntheticDataset(args.synth_size, hw, schema, seed=args.seed + 1)
        else:
            ds = CocoKeypointDataset(src, hw, name or args.schema)
            out[ds.schema.name] = ds
    missing = [k for k in out if k not in cfg.heads]
    if missing:
        raise SystemExit(f"no head registered for dataset(s) {missing}; heads are {sorted(cfg.heads)}")
    return out


def _train_config(args):
    from .train import TrainConfig

    return TrainConfig(
        base_lr=args.lr,
        weight_decay=args.weight_decay,
        layer_decay=args.layer_decay,
        drop_path_rate=args.drop_path,
        epochs=args.epochs,
        decay_epochs=args.decay_epochs,
        batch_size=args.batch_size,
        freeze=args.freeze,
        seed=args.seed,
        steps_per_epoch=args.steps_per_epoch,
        warmup_steps=args.warmup,
        log_every=args.log_every,
        checkpoint_every=args.checkpoint_every,
    )


def cmd_train(args) -> int:
    from dataclasses import replace

    from .model import ViTPose
    from .train import TrainingDivergedError, load_training_checkpoint, train_loop

    tc = _train_config(args)
    if args.resume:
        model, state, start = load_training_checkpoint(args.resume)
    else:
        cfg = _model_config(args)
        if args.drop_path:
            cfg = replace(cfg, encoder=replace(cfg.encoder, drop_path_rate=args.drop_path))
        model, state, start = ViTPose(cfg, seed=args.seed), None, 0
    data = _datasets(args, model.cfg)
    log = args.log or Path(args.out).with_suffix(".jsonl")
    try:
        result = train_loop(model, data, tc, out=args.out, log=log, state=state, start_step=start)
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"trained to step {result.step}; checkpoint {result.checkpoint}; log {log}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import ap_ar, format_report, parse_keypoint_json, pckh
    from .schemas import load_schema

    schema = load_schema(args.schema)
    gt = parse_keypoint_json(args.gt, schema)
    pred = parse_keypoint_json(args.pred, schema)
    if args.metric == "oks-ap":
        if schema.sigmas is None:
            raise SystemExit(f"schema {schema.name!r} has no OKS sigmas")
        report = ap_ar(pred.predictions, gt.annotations, schema.sigmas, image_ids=[im.id for im in gt.images])
        _emit(report.to_dict(), format_report(report), args.json, args.out)
        return 0
    # PCKh pairs each gt annotation with the best-scoring prediction on its image
    best = {}
    for p in pred.predictions:
        if p.image_id not in best or p.score > best[p.image_id].score:
            best[p.image_id] = p
    anns = [a for a in gt.annotations if a.image_id in best]
    if not anns:
        raise SystemExit("no predictions for any ground-truth image")
    g = np.stack([a.keypoints for a in anns])
    xy = np.stack([best[a.image_id].keypoints[:, :2] for a in anns])
    report = pckh(xy, g, args.alpha, schema)
    _emit(report.to_dict(), format_report(report, schema.keypoints), args.json, args.out)
    return 0


def cmd_distill(args) -> int:
    from .distill import attach_token, init_token, learn_token, student_losses, teacher_heatmaps
    from .model import ViTPose
    from .train import AdamW, MultiDatasetSampler, TrainConfig
    from .train.freeze import freeze_all
    from .train.loop import collate, heatmap_geometry

    teacher, _ = ViTPose.load(args.teacher)
    freeze_all(teacher.params)
    cfg = _model_config(args)
    if cfg.encoder.input_hw != teacher.cfg.encoder.input_hw:
        raise SystemExit("teacher and student must share the input size")
    data = _datasets(args, cfg)
    name, ds = next(iter(data.items()))
    hw = cfg.encoder.input_hw
    rng = np.random.default_rng(args.seed)
    geo = heatmap_geometry(cfg.encoder)
    token_batches = [
        collate(ds, rng.integers(0, len(ds), args.batch_size), hw, geometry=geo)[:2] for _ in range(args.token_batches)
    ]
    token = learn_token(
        teacher,
        init_token(teacher.cfg.encoder.embed_dim, rng, teacher.dtype),
        token_batches,
        args.token_steps,
        args.token_lr,
        dataset_id=name,
        teacher_id=str(args.teacher),
    )
    print(f"token loss {token.history[0]:.6f} -> {min(token.history):.6f}")
    student = ViTPose(cfg, seed=args.seed)
    if not args.no_token:
        attach_token(student, token, np.random.default_rng([args.seed, 1]))
    tc = TrainConfig(
        base_lr=args.lr,
        weight_decay=0.0,
        layer_decay=1.0,
        epochs=1,
        decay_epochs=[],
        batch_size=args.batch_size,
        steps_per_epoch=args.steps,
        seed=args.seed,
    )
    opt = AdamW(student.params, tc, cfg.encoder.depth)
    sampler = MultiDatasetSampler({name: len(ds)}, args.batch_size, args.seed)
    for step in range(args.steps):
        idx = [i for _, i in sampler.batch(step).items]
        images, k_gt, _ = collate(ds, idx, hw, geometry=geo)
        k_t = teacher_heatmaps(teacher, images, name) if args.mode == "tod" else None
        student.params.zero_grad()
        loss = student_losses(student, images, k_gt, k_t, args.mode, name, True, np.random.default_rng([args.seed, step]))
        loss.backward()
        opt.step(step)
        if args.log_every and step % args.log_every == 0:
            print(json.dumps({"step": step, "loss": float(loss.data)}))
    student.save(args.out)
    print(f"student checkpoint {args.out}")
    return 0


def cmd_infer(args) -> int:
    from .codec import decode_heatmaps, export_pgm
    from .core.tensor import Tensor, no_grad
    from .datasets import apply_affine, crop_to_input, read_image
    from .distill import PROJ_KEY, TOKEN_KEY, KnowledgeToken, attach_token, student_token
    from .model import ViTPose
    from .train.loop import heatmap_geometry, normalize_image

    model, rest = ViTPose.load(args.checkpoint)
    if TOKEN_KEY in rest:
        attach_token(model, KnowledgeToken.from_entries(rest))
        if PROJ_KEY in rest:
            model.params[PROJ_KEY].data = rest[PROJ_KEY].astype(model.dtype)
    hw = model.cfg.encoder.input_hw
    dataset_id = args.dataset or model.default_dataset
    results = []
    for image_id, path in enumerate(args.image):
        img = read_image(path)
        if args.bbox is None and img.shape[:2] == tuple(hw):
            crop, to_img = img, np.array([[1.0, 0, 0], [0, 1.0, 0]])
        else:
            box = args.bbox or (0.0, 0.0, float(img.shape[1]), float(img.shape[0]))
            crop, to_img = crop_to_input(img, box, hw, padding=1.0 if args.bbox is None else args.padding)
        with no_grad():
            hm = model(Tensor(normalize_image(crop[None])), dataset_id, extra_tokens=student_token(model)).data[0]
        xy, conf = decode_heatmaps(hm, heatmap_geometry(model.cfg.encoder)[1], args.decode)
        xy = apply_affine(xy, to_img)
        kps = np.column_stack([xy, conf])
        results.append(
            {
                "image_id": image_id,
                "file": str(path),
                "category_id": 1,
                "keypoints": [float(v) for v in kps.reshape(-1)],
                "score": float(conf.mean()),
            }
        )
        if args.heatmaps:
            export_pgm(hm, Path(args.heatmaps) / Path(path).stem)
    text = json.dumps(results, indent=1)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(results)} predictions to {args.out}")
    else:
        print(text)
    return 0


def cmd_synth(args) -> int:
    from .datasets import write_coco_dir
    from .train import SynthParams, synth_generate

    params = SynthParams(occlusion_prob=args.occlusion, noise_std=args.noise)
    samples = synth_generate(args.n, args.hw, args.schema, args.seed, params)
    root = write_coco_dir(args.out, samples, args.schema, "." + args.format)
    print(f"wrote {args.n} samples to {root}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

ATTENTION_CHOICES = ["full", "window", "window_shift", "window_pool", "window_shift_pool", "interleaved"]


def _add_model_args(p, default_preset="vitpose-b"):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default=default_preset, help="named architecture preset")
    src.add_argument("--config", help="model config TOML")
    p.add_argument("--input", type=_hw, help="input size HxW, e.g. 256x192")
    p.add_argument("--stride", type=int, help="patch-embedding stride")
    p.add_argument("--attention", choices=ATTENTION_CHOICES)
    p.add_argument("--window", type=_hw, help="window size HxW")


def _add_data_args(p):
    p.add_argument(
        "--data",
        action="append",
        default=None,
        help="'synthetic' or a COCO-json directory, optionally prefixed 'schema='; repeatable",
    )
    p.add_argument("--schema", default="coco")
    p.add_argument("--synth-size", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plainpose", description="Plain vision-transformer pose estimation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cost", help="analytic params / FLOPs / activation memory")
    _add_model_args(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--no-heads", action="store_true")
    p.add_argument("--freeze", choices=["none", "mhsa", "ffn"], help="also estimate training-step MACs")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("train", help="train a model")
    _add_model_args(p, "toy-small")
    _add_data_args(p)
    p.add_argument("--freeze", choices=["none", "mhsa", "ffn"], default="none")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.05)
    p.add_argument("--layer-decay", type=float, default=1.0)
    p.add_argument("--drop-path", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--decay-epochs", type=int, nargs="*", default=[16, 19])
    p.add_argument("--steps-per-epoch", type=int, default=100)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--log", help="metric log path (default: next to --out)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--schema", default="coco")
    p.add_argument("--metric", choices=["oks-ap", "pckh"], default="oks-ap")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distill", help="learn a knowledge token on a teacher and train a student with it")
    _add_model_args(p, "toy-tiny")
    _add_data_args(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--mode", choices=["td", "tod"], default="td")
    p.add_argument("--token-steps", type=int, default=200)
    p.add_argument("--token-lr", type=float, default=1e-2)
    p.add_argument("--token-batches", type=int, default=8)
    p.add_argument("--no-token", action="store_true", help="train the student without the token")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("infer", help="predict keypoints for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", nargs="+", required=True, help="image files (png/jpg/ppm/npy/vtpt)")
    p.add_argument("--bbox", type=_bbox, help="person box x,y,w,h (default: whole image)")
    p.add_argument("--padding", type=float, default=1.25)
    p.add_argument("--dataset", help="head to use (default: first)")
    p.add_argument("--decode", choices=["parabolic", "quarter"], default="parabolic")
    p.add_argument("--heatmaps", help="directory for per-joint PGM heatmaps")
    p.add_argument("--out", help="keypoints JSON path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="write a synthetic COCO-format dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--hw", type=_hw, default=(128, 96))
    p.add_argument("--schema", default="coco")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--occlusion", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--format", choices=["png", "npy", "vtpt"], default="png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "data", "unset") is None:
        args.data = ["synthetic"]
    from .evaluation import ParseError

    try:
        return args.func(args)
    except (ParseError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
