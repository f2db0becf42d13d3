"""``him`` command line: gen-data, train, eval, infer, composite-demo.

Exit codes: 0 success, 1 training diverged, 2 I/O error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .checkpoint import CheckpointError
from .compositing import InstanceRecord, apply_compositing, composite, generate_scene, random_texture
from .config import PRESETS, ConfigError, RunConfig, apply_overrides
from .train import (DETERMINISTIC_ENV, Trainer, TrainingDiverged, deterministic_mode, evaluate_scenes,
                    load_dataset, load_model, predict, set_deterministic, write_dataset)

EXIT_OK, EXIT_DIVERGED, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3

log = logging.getLogger("him")


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        config = RunConfig.load(args.config)
    else:
        config = PRESETS[getattr(args, "preset", "toy")]()
    return apply_overrides(config, getattr(args, "set", None) or [])


def _read_image(path: str) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.transpose(np.asarray(img, dtype=np.float64) / 255.0, (2, 0, 1))


def _write_gray(path: Path, alpha: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(alpha, 0, 1) * 255).astype(np.uint8)).save(path)


def _write_rgb(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(np.transpose(image, (1, 2, 0)), 0, 1) * 255).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _config(args)
    config.data.validate()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_dataset(config, args.count, out, first_seed=args.seed if args.seed is not None else config.seed)
    except OSError as e:
        log.error("cannot write dataset: %s", e)
        return EXIT_IO
    print(f"wrote {args.count} scenes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        log.error("cannot create run directory: %s", e)
        return EXIT_IO
    if deterministic_mode():
        set_deterministic(True)
    if args.resume:
        config = None
    else:
        config = _config(args)
        config.validate()
    data_dir = args.data or (config.dataset if config else None)
    try:
        if data_dir is None:
            raise FileNotFoundError("no dataset given (--data or dataset in the config)")
        trimap_kwargs = (config.data if config else RunConfig().data).trimap_kwargs()
        _, scenes = load_dataset(data_dir, trimap_kwargs)
    except (OSError, FileNotFoundError) as e:
        log.error("cannot read dataset: %s", e)
        return EXIT_IO
    trainer = Trainer.resume(args.resume, scenes, out) if args.resume else Trainer(config, scenes, out)
    (out / "config.json").write_text(trainer.config.to_json())
    with open(out / "losses.jsonl", "a") as fh:
        try:
            trainer.run(args.steps, log_file=fh)
        except TrainingDiverged as e:
            log.error("%s", e)
            return EXIT_DIVERGED
    final = trainer.save(out / "checkpoints" / "last.pt")
    manifest = {"config": "config.json", "log": "losses.jsonl", "checkpoint": str(final.relative_to(out)),
                "steps": trainer.step, "dataset": str(data_dir)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"trained {trainer.step} steps; checkpoint {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        model, config = load_model(args.checkpoint)
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_IO
    except (CheckpointError, ConfigError) as e:
        log.error("%s", e)
        return EXIT_CONFIG
    if args.config:
        requested = RunConfig.load(args.config)
        if requested.model != config.model:
            log.error("model configuration in %s does not match the checkpoint", args.config)
            return EXIT_CONFIG
    try:
        names, scenes = load_dataset(args.data, config.data.trimap_kwargs())
    except OSError as e:
        log.error("cannot read dataset: %s", e)
        return EXIT_IO
    threshold = args.threshold if args.threshold is not None else config.select_threshold
    report = evaluate_scenes(model, scenes, names, threshold=threshold, oracle=args.oracle)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text if not args.out else f"report written to {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    try:
        model, config = load_model(args.checkpoint)
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_IO
    except CheckpointError as e:
        log.error("%s", e)
        return EXIT_CONFIG
    try:
        image = _read_image(args.image)
        background = _read_image(args.background) if args.background else None
    except (OSError, UnidentifiedImageError) as e:
        log.error("cannot read image: %s", e)
        return EXIT_IO
    if background is not None and background.shape != image.shape:
        log.error("background %s does not match image %s", background.shape, image.shape)
        return EXIT_IO
    threshold = args.threshold if args.threshold is not None else config.select_threshold
    pred = predict(model, image, threshold, keep_output=bool(args.dump_guidance))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (q, score, alpha) in enumerate(zip(pred.indices, pred.scores, pred.alphas)):
        name = f"instance_{k}.png"
        _write_gray(out / name, alpha)
        entries.append({"file": name, "query": q, "confidence": score, "mask_threshold": 0.5})
    manifest = {"image": str(args.image), "height": image.shape[1], "width": image.shape[2], "instances": entries}
    total = pred.alphas.sum(0) if len(pred.alphas) else np.zeros(image.shape[1:])
    total = np.clip(total, 0.0, 1.0)
    if background is not None:
        # the input colour stands in for the (unpredicted) foreground colour
        recomposed = total[None] * image + (1 - total[None]) * background
        _write_rgb(out / "composite.png", recomposed)
        manifest["composite"] = "composite.png"
    if args.original_background:
        try:
            original = _read_image(args.original_background)
        except (OSError, UnidentifiedImageError) as e:
            log.error("cannot read image: %s", e)
            return EXIT_IO
        rebuilt = total[None] * image + (1 - total[None]) * original
        manifest["recomposition_residual"] = float(np.abs(rebuilt - image).mean())
    if args.dump_guidance:
        _dump_guidance(pred.output, Path(args.dump_guidance), image.shape[1:])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"{len(entries)} instance(s) written to {out}")
    return EXIT_OK


def _dump_guidance(output, directory: Path, size) -> None:
    """Softmaxed attention of every guidance head as grayscale PNGs (channel 0 = background)."""
    directory.mkdir(parents=True, exist_ok=True)
    for h, weights in enumerate(output.guidance.attention):
        w = weights[0, :, 0].double().numpy()
        for c, plane in enumerate(w):
            img = Image.fromarray(np.round(plane * 255).astype(np.uint8)).resize((size[1], size[0]), Image.NEAREST)
            img.save(directory / f"head{h}_candidate{c}.png")


def cmd_composite_demo(args) -> int:
    """Regenerate a scene and place its instances over a fresh background."""
    config = _config(args)
    scene = generate_scene(config.data, args.seed)
    rng = np.random.default_rng(args.seed + 1_000_003)
    new_bg = random_texture(rng, scene.height, scene.width, rng.uniform(0.2, 0.8, size=3), amp=0.5, waves=6)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        log.error("%s", e)
        return EXIT_IO
    fgs = np.stack([r.foreground for r in scene.instances])
    moved = apply_compositing(scene.effective_alphas, fgs, new_bg)
    recomposed = composite(new_bg, [InstanceRecord.from_layer(r.alpha, r.foreground) for r in scene.instances])
    _write_rgb(out / "image.png", scene.image)
    _write_rgb(out / "new_background.png", new_bg)
    _write_rgb(out / "composite.png", moved)
    for k, a in enumerate(scene.effective_alphas):
        _write_gray(out / f"alpha_{k}.png", a)
    report = {"seed": args.seed, "instances": scene.num_instances, "residual": scene.residual(),
              "recomposition_difference": float(np.abs(recomposed.image - moved).max())}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="him", description="End-to-end human instance matting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--preset", choices=sorted(PRESETS), default="toy")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry (repeatable)")

    p = sub.add_parser("gen-data", help="write a synthetic scene dataset")
    config_args(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="seed of the first scene (default: config seed)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help=f"train a model (set {DETERMINISTIC_ENV}=1 for deterministic mode)")
    config_args(p)
    p.add_argument("--data", help="dataset directory (default: config 'dataset')")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, help="stop after this many steps")
    p.add_argument("--resume", help="checkpoint to resume from (its config is used)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="expected run config; must match the checkpoint's model")
    p.add_argument("--threshold", type=float)
    p.add_argument("--oracle", action="store_true", help="use ground truth as predictions (pipeline check)")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict instance mattes for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--background", help="composite the predicted instances over this image")
    p.add_argument("--original-background", help="report the recomposition residual against this background")
    p.add_argument("--dump-guidance", metavar="DIR", help="write per-head attention maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("composite-demo", help="move a synthetic scene's instances onto a new background")
    config_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_composite_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        log.error("%s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
