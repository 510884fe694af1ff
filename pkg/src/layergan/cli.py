"""Command-line entry points.

Exit codes: 0 on success, 1 on runtime failure, 2 on usage or configuration
errors. Every command prints an effective-config block first, so a run can be
reproduced from its own output.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict

from .config import effective_toml, resolve_train_config
from .data import (
    SceneSpec,
    build_dataset,
    dataset_up_to_date,
    ingest_external,
    load_manifest,
)
from .evaluation import (
    SegEvalConfig,
    correlation_report,
    eval_mi,
    eval_segmentation,
    fid_from_checkpoint,
    load_records,
    merge_record_fragment,
)
from .mi import MineConfig
from .models import load_checkpoint
from .training import TrainConfig, TrainingDiverged, fit, load_generators, sample_layers, sample_synthetic
from .viz import layer_grid


def _print_effective(command: str, values: dict) -> None:
    print(f"# effective-config [{command}]")
    for key in sorted(values):
        print(f"{key} = {values[key]}")
    print()


def _manifest_summary(manifest) -> str:
    total = len(manifest.train) + len(manifest.test)
    lines = [
        f"root: {manifest.root}",
        f"img_size: {manifest.img_size}  spec_hash: {manifest.spec_hash}",
        f"entries: {total} (train {len(manifest.train)}, test {len(manifest.test)})",
    ]
    if manifest.excluded:
        lines.append(f"excluded: {len(manifest.excluded)} -> {', '.join(manifest.excluded)}")
    return "\n".join(lines)


def _run_identity(ckpt: str) -> dict:
    cfg: TrainConfig = load_checkpoint(ckpt)["cfg"]
    enabled = cfg.ils_enabled
    return {
        "lambda_ils": cfg.weights.lambda_ils if enabled else 0.0,
        "loss_kind": cfg.ils.loss_kind if enabled else "none",
        "seed": cfg.seed,
    }


def _write_fragment(record_path: str | None, ckpt: str, fragment: dict) -> None:
    if record_path is None:
        return
    payload = {**_run_identity(ckpt), **fragment}
    merge_record_fragment(record_path, payload)
    print(f"record updated: {record_path}")


# --- commands ----------------------------------------------------------------


def cmd_make_dataset(args) -> int:
    _print_effective("make-dataset", {
        k: getattr(args, k)
        for k in ("out", "train", "test", "seed", "img_size", "shape_family",
                  "fg_texture", "bg_texture", "area_min", "area_max", "ingest",
                  "crop", "force")
    })
    if args.ingest is not None:
        manifest = ingest_external(args.ingest, args.crop, args.img_size, args.out)
        print(_manifest_summary(manifest))
        return 0
    spec = SceneSpec(
        img_size=args.img_size,
        shape_family=args.shape_family,
        fg_texture=args.fg_texture,
        bg_texture=args.bg_texture,
        area_range=(args.area_min, args.area_max),
        seed=args.seed,
    )
    if not args.force:
        existing = dataset_up_to_date(spec, args.train, args.test, args.out)
        if existing is not None:
            print(f"dataset at {args.out} is up to date; nothing to do")
            print(_manifest_summary(existing))
            return 0
    manifest = build_dataset(spec, args.train, args.test, args.out, force=args.force)
    print(_manifest_summary(manifest))
    return 0


_TRAIN_FLAG_KEYS = {
    "seed": "seed",
    "batch_size": "batch_size",
    "total_images": "total_images_shown",
    "lr": "lr",
    "checkpoint_every": "checkpoint_every",
    "log_every": "log_every",
    "img_size": "net.img_size",
    "base_channels": "net.base_channels",
    "ils_kind": "ils.loss_kind",
    "ils_weight": "weights.lambda_ils",
    "gamma": "weights.gamma",
    "eta": "weights.eta",
    "max_shift": "perturb.max_shift_frac",
}


def cmd_train(args) -> int:
    overrides = {}
    for flag, dotted in _TRAIN_FLAG_KEYS.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[dotted] = value
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    cfg = resolve_train_config(args.config, overrides=overrides)
    print("# effective-config [train]")
    print(effective_toml(cfg))
    manifest = load_manifest(args.data)
    final = fit(cfg, manifest, args.out, resume_from=args.resume)
    print(f"final checkpoint: {final}")
    return 0


def cmd_generate(args) -> int:
    _print_effective("generate", {k: getattr(args, k) for k in ("ckpt", "out", "n", "seed")})
    manifest = sample_synthetic(args.ckpt, args.n, args.seed, args.out)
    print(_manifest_summary(manifest))
    return 0


def cmd_eval_seg(args) -> int:
    _print_effective("eval-seg", {
        k: getattr(args, k)
        for k in ("ckpt", "data", "n_synthetic", "steps", "seed", "record")
    })
    manifest = load_manifest(args.data)
    cfg = SegEvalConfig(n_synthetic=args.n_synthetic, train_steps=args.steps, seed=args.seed)
    metrics = eval_segmentation(args.ckpt, manifest, cfg)
    print(
        f"iou={metrics.iou:.4f} dice={metrics.dice:.4f} "
        f"(threshold {metrics.threshold}, {metrics.n_images} test images)"
    )
    _write_fragment(args.record, args.ckpt, {"seg": asdict(metrics)})
    return 0


def cmd_eval_mi(args) -> int:
    _print_effective("eval-mi", {
        k: getattr(args, k) for k in ("ckpt", "n", "seed", "mine_steps", "record")
    })
    mine = MineConfig(train_steps=args.mine_steps, seed=args.seed)
    est = eval_mi(args.ckpt, n=args.n, seed=args.seed, mine=mine)
    print(f"layerwise MI = {est.value:.4f} nats ({est.estimator}, {est.n_samples} samples)")
    _write_fragment(args.record, args.ckpt, {"mi": asdict(est)})
    return 0


def cmd_fid(args) -> int:
    _print_effective("fid", {
        k: getattr(args, k)
        for k in ("ckpt", "data", "n", "seed", "extractor_seed", "extractor", "record")
    })
    manifest = load_manifest(args.data)
    res = fid_from_checkpoint(
        args.ckpt, manifest, n=args.n, seed=args.seed,
        extractor_seed=args.extractor_seed, cache_path=args.extractor,
    )
    note = " (eps-regularized covariance)" if res.regularized else ""
    print(f"fid-lite = {res.value:.4f} over {res.n_gen} gen / {res.n_real} real images{note}")
    _write_fragment(args.record, args.ckpt, {"fid_lite": res.value})
    return 0


def cmd_report(args) -> int:
    _print_effective("report", {
        "records": " ".join(args.records), "out": args.out, "exclude_at": args.exclude_at
    })
    records = load_records(args.records)
    report = correlation_report(records, out_dir=args.out, exclude_lambda_at_least=args.exclude_at)
    print(report.table)
    if report.plot_path is not None:
        print(f"\nscatter plot: {report.plot_path}")
        print(f"records file: {report.records_path}")
    return 0


def cmd_grid(args) -> int:
    _print_effective("grid", {k: getattr(args, k) for k in ("ckpt", "out", "k", "seed")})
    gens, _ = load_generators(args.ckpt)
    layers = sample_layers(gens, args.k, args.seed)
    path = layer_grid(layers, args.out, k=args.k)
    print(f"grid written: {path}")
    return 0


# --- parser -------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layergan",
        description="Layered image synthesis with independence losses: data, "
        "training, evaluation, and reporting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="generate the synthetic dataset or ingest an external one")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--train", type=int, default=2048)
    p.add_argument("--test", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--img-size", type=int, default=32)
    p.add_argument("--shape-family", default="mixed", choices=("ellipse", "rectangle", "triangle", "mixed"))
    p.add_argument("--fg-texture", default="flat", choices=("flat", "gradient", "noise"))
    p.add_argument("--bg-texture", default="patches", choices=("gradient", "perlin_like", "patches"))
    p.add_argument("--area-min", type=float, default=0.1)
    p.add_argument("--area-max", type=float, default=0.3)
    p.add_argument("--ingest", default=None, metavar="SRC", help="ingest an external image tree instead of generating")
    p.add_argument("--crop", default="center", choices=("center", "bbox"))
    p.add_argument("--force", action="store_true", help="rebuild even when up to date")
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="run the adversarial training loop")
    p.add_argument("--data", required=True, help="dataset root (with manifest.json)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    p.add_argument("--config", default=None, help="TOML config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--total-images", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=None)
    p.add_argument("--img-size", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--ils-kind", default=None, choices=("mi", "l1", "none"))
    p.add_argument("--ils-weight", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--max-shift", type=float, default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any dotted config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write generated (image, mask) pairs in the dataset layout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000, help="set size (the full protocol uses 10000)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval-seg", help="post-hoc segmentation IoU/DICE of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-synthetic", type=int, default=2048)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--record", default=None, help="per-run record file to update")
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser("eval-mi", help="layerwise MI of generated scenes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mine-steps", type=int, default=2000)
    p.add_argument("--record", default=None)
    p.set_defaults(func=cmd_eval_mi)

    p = sub.add_parser("fid", help="generation-quality score vs the training split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--extractor", default=None, help="cache path for the frozen feature extractor")
    p.add_argument("--record", default=None)
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("report", help="sweep table, correlation, and scatter plot")
    p.add_argument("--records", nargs="+", required=True, help="per-run record files")
    p.add_argument("--out", default=None, help="directory for report.txt / records.json / scatter")
    p.add_argument("--exclude-at", type=float, default=2.0, help="exclude runs with lambda_ils >= this")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("grid", help="render background/foreground/composed/mask rows")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=8, help="number of columns (sampled latents)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grid)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(json.dumps(exc.snapshot, default=str, indent=2), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 — process boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
