"""Command-line entry point: train / eval / infer / decompose / mask / video.

Every subcommand is deterministic given the run manifest. Exit codes:
0 success, 2 usage or configuration error, 3 runtime numeric failure.
The full flag, config and file format reference lives in MANUAL.md.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__, colorio, decomposition, evaluation, training
from .datasets import scan_dataset
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    NumericError,
    SampleError,
    ShapeError,
)

TENSOR_ARCHIVE_FORMAT = "deshadow-tensors"
_IMAGE_EXTS = {".png", ".jpg", ".jpeg"}


def _iso_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def save_tensor_archive(path, tensors: dict[str, np.ndarray]) -> None:
    torch.save(
        {
            "format": TENSOR_ARCHIVE_FORMAT,
            "version": 1,
            "tensors": {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in tensors.items()},
        },
        path,
    )


def _save_mask_png(mask: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


def _parse_set(values: list[str]) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _apply_overrides(data: dict, overrides: dict) -> None:
    for key, value in overrides.items():
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override non-mapping key {key!r}")
        node[parts[-1]] = value


def build_config(args) -> training.TrainConfig:
    """Merge config file, preset, convenience flags, and --set overrides."""
    data: dict = {}
    config_path = args.config or os.environ.get("DESHADOW_CONFIG")
    if config_path:
        loaded = yaml.safe_load(Path(config_path).read_text())
        if loaded:
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {config_path} is not a key-value tree")
            data = loaded
    if getattr(args, "preset", None) == "toy":
        base = training.config_to_dict(training.TrainConfig.toy())
        base.update(data)
        data = base
    for flag in ("variant", "epochs", "seed", "lr", "batch_size", "image_size"):
        val = getattr(args, flag, None)
        if val is not None:
            data[flag] = val
    _apply_overrides(data, _parse_set(getattr(args, "set", None)))
    return training.config_from_dict(data)


def _write_manifest(out_dir: Path, payload: dict) -> Path:
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def _records_for_split(index, split: str):
    if split == "all":
        return index.records
    return index.split(split)


def cmd_train(args) -> int:
    config = build_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = scan_dataset(args.data, args.layout, seed=config.seed)
    records = _records_for_split(index, args.split)
    if index.mismatches:
        evaluation.write_mismatch_report(index.mismatches, out_dir / "mismatches.txt")
    manifest = {
        "command": "train",
        "version": __version__,
        "config": training.config_to_dict(config),
        "seed": config.seed,
        "data": str(args.data),
        "layout": args.layout,
        "split": args.split,
        "started_at": _iso_now(),
        "finished_at": None,
        "status": "running",
        "outputs": {
            "checkpoint": str(out_dir / "checkpoint_final.pt"),
            "losses_csv": str(out_dir / "losses.csv"),
            "losses_jsonl": str(out_dir / "losses.jsonl"),
        },
    }
    _write_manifest(out_dir, manifest)
    final = training.train(config, records, out_dir, resume=args.resume)
    manifest["finished_at"] = _iso_now()
    manifest["status"] = "complete"
    _write_manifest(out_dir, manifest)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    predictor = training.load_predictor(ckpt)
    config = predictor.state.config
    index = scan_dataset(args.data, args.layout, seed=config.seed)
    records = _records_for_split(index, args.split)
    result = evaluation.evaluate_dataset(
        predictor,
        records,
        mask_source=args.mask_source,
        mode=args.metric_mode,
        image_size=args.image_size if args.image_size else config.image_size,
        quantize=args.quantize,
        pooled_mean=args.pooled_mean,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_csv(result, out_dir / "metrics.csv")
    if result.skipped:
        (out_dir / "skipped.txt").write_text("\n".join(result.skipped) + "\n")
    if args.grid:
        grid_dir = out_dir / "grids"
        grid_dir.mkdir(exist_ok=True)
        _write_grids(predictor, records, grid_dir, args.image_size or config.image_size)
    print(evaluation.format_summary(result, label=config.variant))
    return 0


def _write_grids(predictor, records, grid_dir: Path, image_size: int) -> None:
    from .datasets import load_sample

    for rec in records:
        try:
            shadow, free, _ = load_sample(rec, image_size)
        except SampleError:
            continue
        pred = predictor(shadow)
        colorio.save_image(np.concatenate([shadow, pred, free], axis=1), grid_dir / f"{rec.stem}.png")


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in _IMAGE_EXTS)
    return [path]


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    predictor = training.load_predictor(ckpt)
    inputs = _input_images(Path(args.input))
    if not inputs:
        raise ConfigError(f"no input images under {args.input}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for img_path in inputs:
        img = colorio.load_image(img_path)
        outs = training.predict_full(predictor.state, img)
        stem = img_path.stem
        colorio.save_image(np.clip(outs["prediction"], 0, 1), out_dir / f"{stem}_fine.png")
        if args.dump_intermediates:
            if "coarse" in outs:
                colorio.save_image(np.clip(outs["coarse"], 0, 1), out_dir / f"{stem}_coarse.png")
            if "rem1" in outs:
                colorio.save_image(np.clip(outs["rem1"], 0, 1), out_dir / f"{stem}_rem1.png")
            if "rem2" in outs:
                colorio.save_image(np.clip(outs["rem2"], 0, 1), out_dir / f"{stem}_rem2.png")
            if "res" in outs:
                colorio.save_image(decomposition.residual_to_visual(outs["res"]), out_dir / f"{stem}_residual.png")
            if "illum" in outs:
                colorio.save_image(
                    decomposition.illumination_to_visual(outs["illum"]), out_dir / f"{stem}_illumination.png"
                )
    print(f"wrote results for {len(inputs)} image(s) to {out_dir}")
    return 0


def cmd_decompose(args) -> int:
    shadow = colorio.load_image(args.shadow)
    free = colorio.load_image(args.shadow_free)
    res = decomposition.gt_residual(shadow, free)
    illum = decomposition.gt_inverse_illumination(shadow, free)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    colorio.save_image(decomposition.residual_to_visual(res), out_dir / "residual.png")
    colorio.save_image(decomposition.illumination_to_visual(illum), out_dir / "illumination.png")
    save_tensor_archive(out_dir / "decomposition.pt", {"residual": res, "illumination": illum})
    print(f"wrote residual/illumination maps to {out_dir}")
    return 0


def cmd_mask(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    predictor = training.load_predictor(ckpt)
    img = colorio.load_image(args.input)
    outs = training.predict_full(predictor.state, img)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    tau = args.tau
    masks = {}
    if "res" in outs:
        masks["residual"] = decomposition.extract_shadow_mask(outs["res"], "residual", args.method, tau)
        _save_mask_png(masks["residual"], out_dir / "mask_residual.png")
    if "illum" in outs:
        masks["illumination"] = decomposition.extract_shadow_mask(outs["illum"], "illumination", args.method, tau)
        _save_mask_png(masks["illumination"], out_dir / "mask_illumination.png")
    if not masks:
        raise ConfigError(
            f"variant {predictor.state.config.variant} predicts neither residual nor illumination"
        )
    union = np.zeros(img.shape[:2], dtype=np.uint8)
    for m in masks.values():
        union |= m
    _save_mask_png(union, out_dir / "mask_union.png")
    if args.gt_mask:
        from .datasets import load_mask

        gt = load_mask(args.gt_mask, target_size=union.shape)
        lines = []
        for name, m in list(masks.items()) + [("union", union)]:
            acc, ber = evaluation.mask_score(m, gt)
            lines.append(f"{name}: accuracy={acc:.4f} balanced_error_rate={ber:.4f}")
        report = "\n".join(lines)
        (out_dir / "mask_report.txt").write_text(report + "\n")
        print(report)
    print(f"wrote masks to {out_dir}")
    return 0


def cmd_video(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} does not exist")
    frames_in = Path(args.frames_in)
    frames = sorted(p for p in frames_in.iterdir() if p.suffix.lower() in _IMAGE_EXTS) if frames_in.is_dir() else []
    if not frames:
        raise ConfigError(f"no frames under {args.frames_in}")
    predictor = training.load_predictor(ckpt)
    out_dir = Path(args.frames_out)
    out_dir.mkdir(parents=True, exist_ok=True)
    # per-frame processing in lexicographic order; no temporal coupling
    for frame in frames:
        img = colorio.load_image(frame)
        colorio.save_image(predictor(img), out_dir / frame.name)
    print(f"processed {len(frames)} frame(s) into {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deshadow", description=__doc__)
    parser.add_argument("--version", action="version", version=f"deshadow {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model (or an ablation variant)")
    p.add_argument("--config", help="YAML config file (env DESHADOW_CONFIG sets the default)")
    p.add_argument("--preset", choices=["toy"], help="start from the toy preset")
    p.add_argument("--data", required=True, help="dataset root directory")
    p.add_argument("--layout", default="generic-pairs", choices=["istd", "srd", "generic-pairs"])
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--out", required=True, help="run directory for manifest/checkpoints/logs")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--variant", choices=sorted(training.VARIANTS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="region-masked Lab metrics over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--layout", default="generic-pairs", choices=["istd", "srd", "generic-pairs"])
    p.add_argument("--split", default="test", choices=["train", "test", "all"])
    p.add_argument("--mask-source", dest="mask_source", default="derived", choices=["provided", "derived"])
    p.add_argument("--metric-mode", dest="metric_mode", default="rmse", choices=["rmse", "mae"])
    p.add_argument("--image-size", dest="image_size", type=int, help="evaluation resize (default: training size)")
    p.add_argument("--quantize", action="store_true", help="snap images to 8-bit before Lab conversion")
    p.add_argument("--pooled-mean", dest="pooled_mean", action="store_true", help="pool pixels instead of averaging per-image metrics")
    p.add_argument("--grid", action="store_true", help="write shadow|prediction|truth comparison grids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="remove shadows from images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="an image file or a directory of images")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-intermediates", dest="dump_intermediates", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("decompose", help="ground-truth residual/illumination from a pair")
    p.add_argument("--shadow", required=True)
    p.add_argument("--shadow-free", dest="shadow_free", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("mask", help="shadow detection masks from predicted maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--method", default="otsu", choices=["otsu", "fixed"])
    p.add_argument("--tau", type=float, help="threshold for --method fixed")
    p.add_argument("--gt-mask", dest="gt_mask", help="score the masks against this ground truth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("video", help="per-frame shadow removal over a frame directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames-in", dest="frames_in", required=True)
    p.add_argument("--frames-out", dest="frames_out", required=True)
    p.set_defaults(func=cmd_video)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, DomainError, FormatError, SampleError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
