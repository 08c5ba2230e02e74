"""Command-line entry point: gen, train, eval, params, bench, viz."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError
from .data import DataError, ShapesSpec, gen_shapes, load_dataset, read_ppm, write_dataset, write_pgm
from .evalkit import CSV_HEADER, bench_many, evaluate_model, export_confidence
from .pyramid import VARIANTS, ModelConfig, SfpnModel, build_model, count_params
from .train import AUGMENT_CODES, TrainConfig, load_model, train

log = logging.getLogger("sfpn")

EXIT_OK, EXIT_ARGS, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _threads() -> int | None:
    v = os.environ.get("SFPN_THREADS")
    return int(v) if v else None


def _load_config(path: str | None, **overrides) -> ModelConfig:
    if path is None:
        d = {}
    else:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {p} not found")
        d = json.loads(p.read_text())
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ModelConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad model config: {exc}") from exc


def _load_checkpoint_model(cfg: ModelConfig, ckpt: str) -> SfpnModel:
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint {ckpt} not found")
    try:
        model, _ = load_model(ckpt, cfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return model


def _split(records, val_data: str | None, val_count: int):
    if val_data:
        val, _ = load_dataset(val_data)
        return records, val
    if val_count:
        if val_count >= len(records):
            raise UsageError("--val-count must be smaller than the dataset")
        return records[:-val_count], records[-val_count:]
    return records, []


# ------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    spec = ShapesSpec(image_size=args.size, num_images=args.n, seed=args.seed)
    write_dataset(gen_shapes(spec), args.out)
    print(f"wrote {args.n} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, seed=args.model_seed)
    records, _ = load_dataset(args.data)
    train_set, val_set = _split(records, args.val_data, args.val_count)
    model = build_model(cfg)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, final_lr=args.final_lr,
                       momentum=args.momentum, seed=args.seed, sol=args.sol, objectness=args.objectness,
                       augment=args.augment)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    rows = train(model, train_set, val_set, tcfg, out_dir=out, resume=args.resume, max_steps=args.max_steps)
    if args.plot:
        from .plotting import plot_training

        plot_training(rows, out / "train_curve.png")
    last = rows[-1] if rows else {}
    print(json.dumps({"epochs": len(rows), "final_loss": last.get("loss"), "final_ap50": last.get("ap50")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    model = _load_checkpoint_model(cfg, args.checkpoint)
    records, _ = load_dataset(args.data)
    result, dets = evaluate_model(model, records, sol=args.sol, conf_threshold=args.conf,
                                  iou_threshold=args.nms)
    text = result.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    if args.detections:
        with open(args.detections, "w") as fh:
            for d in dets:
                fh.write(json.dumps(d.to_json()) + "\n")
    print(text)
    return EXIT_OK


def param_table(cfg: ModelConfig, variants=VARIANTS) -> list[dict]:
    rows = []
    for v in variants:
        for sol in (False, True):
            m = build_model(ModelConfig.from_dict({**json.loads(cfg.to_json()), "variant": v, "sol_enabled": sol}))
            parts = {s: count_params(m, s) for s in ("backbone", "neck", "head", "total")}
            rows.append({"variant": v + ("-SOL" if sol else ""), **parts})
    return rows


def cmd_params(args) -> int:
    cfg = _load_config(args.config, neck_channels=args.neck_channels, num_classes=args.num_classes)
    rows = param_table(cfg)
    print(f"{'variant':<12}{'backbone':>12}{'neck':>12}{'head':>10}{'total':>12}")
    for r in rows:
        print(f"{r['variant']:<12}{r['backbone']:>12,}{r['neck']:>12,}{r['head']:>10,}{r['total']:>12,}")
    neck = {r["variant"]: r["neck"] for r in rows}
    d35 = neck["SFPN-5"] - neck["SFPN-3"]
    d59 = neck["SFPN-9"] - neck["SFPN-5"]
    print(f"neck delta SFPN-3 -> SFPN-5: {d35:,}")
    print(f"neck delta SFPN-5 -> SFPN-9: {d59:,}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("variant,backbone,neck,head,total\n")
            for r in rows:
                fh.write(f"{r['variant']},{r['backbone']},{r['neck']},{r['head']},{r['total']}\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args.config)
    variants = args.variants.split(",") if args.variants else [cfg.variant]
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else [cfg.input_size]
    modes = {"off": [False], "on": [True], "both": [False, True]}[args.sol]
    models = [build_model(ModelConfig.from_dict({**json.loads(cfg.to_json()), "variant": v})) for v in variants]
    reports = []
    for s in sizes:
        # one interleaved sweep per size, so every variant sees the same machine state
        jobs = [(m, sol) for m in models for sol in modes]
        for rep in bench_many(jobs, s, args.iters, args.warmup):
            reports.append(rep)
            print(rep.csv_row(), flush=True)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "latency.csv").write_text(CSV_HEADER + "\n" + "\n".join(r.csv_row() for r in reports) + "\n")
        (out / "latency.json").write_text("[" + ",\n".join(r.to_json() for r in reports) + "]\n")
        if args.plot:
            from .plotting import plot_latency

            plot_latency(reports, out / "latency.png")
    return EXIT_OK


def cmd_viz(args) -> int:
    cfg = _load_config(args.config)
    model = _load_checkpoint_model(cfg, args.checkpoint) if args.checkpoint else build_model(cfg)
    if args.zero:
        for _, p in model.params:
            p.data = np.zeros_like(p.data)
    if args.image:
        image = read_ppm(Path(args.image).read_bytes())
    elif args.data:
        records, _ = load_dataset(args.data)
        if not 0 <= args.index < len(records):
            raise UsageError(f"--index {args.index} out of range")
        image = records[args.index].image
    else:
        image = np.random.default_rng(cfg.seed).uniform(0, 1, (1, 3, cfg.input_size, cfg.input_size))
    if image.shape[-1] != cfg.input_size:
        raise DataError(f"image size {image.shape[-1]} does not match config input_size {cfg.input_size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    strides = model.head_strides(args.sol)
    maps = []
    for k, stride in enumerate(strides):
        cmap = export_confidence(model, image.astype(model.dtype), k, args.sol).data[0, 0]
        maps.append(cmap)
        (out / f"level{k}_stride{stride}.pgm").write_bytes(write_pgm(cmap))
    if args.plot:
        from .plotting import plot_confidence

        plot_confidence(image, maps, [f"stride {s}" for s in strides], out / "confidence.png")
    print(f"wrote {len(strides)} confidence maps to {out}")
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfpn", description="Synthetic fusion pyramid detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the toy shapes dataset")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--val-count", type=int, default=0, help="hold out the last N records for validation")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--final-lr", type=float, default=1e-4)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model-seed", type=int)
    t.add_argument("--sol", action="store_true", help="train heads on synthetic levels as well")
    t.add_argument("--objectness", choices=("balanced", "mean"), default="balanced",
                   help="objectness BCE normalisation (see detection_loss)")
    t.add_argument("--augment", choices=tuple(AUGMENT_CODES), default="dihedral",
                   help="random flips/transposes applied to training images")
    t.add_argument("--resume")
    t.add_argument("--max-steps", type=int, help="cap optimizer steps per epoch (smoke runs)")
    t.add_argument("--out", required=True)
    t.add_argument("--plot", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="COCO-style AP of a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--sol", action="store_true")
    e.add_argument("--conf", type=float, default=0.01)
    e.add_argument("--nms", type=float, default=0.5)
    e.add_argument("--out")
    e.add_argument("--detections", help="write detections as JSON lines")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("params", help="parameter counts per variant")
    pr.add_argument("--config")
    pr.add_argument("--neck-channels", type=int)
    pr.add_argument("--num-classes", type=int)
    pr.add_argument("--csv")
    pr.set_defaults(func=cmd_params)

    b = sub.add_parser("bench", help="single-threaded inference latency")
    b.add_argument("--config")
    b.add_argument("--variants", help="comma-separated, default: config variant")
    b.add_argument("--sizes", help="comma-separated input sizes")
    b.add_argument("--sol", choices=("off", "on", "both"), default="off")
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--out")
    b.add_argument("--plot", action="store_true")
    b.set_defaults(func=cmd_bench)

    v = sub.add_parser("viz", help="export per-level confidence maps as PGM")
    v.add_argument("--config", required=True)
    v.add_argument("--checkpoint")
    v.add_argument("--zero", action="store_true", help="zero all weights first")
    v.add_argument("--image", help="PPM input image")
    v.add_argument("--data", help="dataset directory (use with --index)")
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--sol", action="store_true")
    v.add_argument("--out", required=True)
    v.add_argument("--plot", action="store_true")
    v.set_defaults(func=cmd_viz)
    return p


def _check_positive(args) -> None:
    for name in ("n", "epochs", "batch_size", "iters", "lr", "size"):
        val = getattr(args, name, None)
        if val is None:
            continue
        if name == "n":
            if val < 0:
                raise UsageError("--n must be >= 0")
        elif val <= 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive")
    if getattr(args, "warmup", 0) < 0:
        raise UsageError("--warmup must be >= 0")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = _threads()
    try:
        _check_positive(args)
        if threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
