"""Command-line entry point: ``atdsr {train,infer,eval,params,viz-categories}``."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import build_dataset, make_pair, mod_crop, quantize, synthetic_images
from .errors import ConfigError, ContractError, DataError, NonFiniteError
from .io import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_png,
    load_run_config,
    save_checkpoint,
    save_mask,
    save_png,
    schema_of,
)
from .metrics import EvalProtocol, bicubic_up, psnr, ssim
from .model import PRESET_NAMES, AtdModel, build_model, count_params, forward, preset, upscale
from .tensor import Tensor, no_grad
from .train import TrainConfig, train_loop

log = logging.getLogger("atdsr")

PAPER_PARAMS = {("atd_light", 2): 753_000, ("atd_light", 3): 760_000, ("atd_light", 4): 769_000,
                ("atd", 2): 20_100_000, ("atd", 3): 20_300_000, ("atd", 4): 20_300_000}
PARAM_TOLERANCE = 0.10

EXIT_CONTRACT, EXIT_DATA, EXIT_IO = 2, 3, 4

TRAIN_SCHEMA = schema_of(TrainConfig, {"preset": str, "data": str, "synthetic": int, "out": str})


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_png_dir(directory) -> dict[str, np.ndarray]:
    """All readable PNGs under ``directory`` by stem; unreadable files are listed and skipped."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    images, bad = {}, []
    for path in sorted(directory.glob("*.png")):
        try:
            images[path.stem] = load_png(path)
        except OSError as exc:
            bad.append(f"{path.name}: {exc}")
    for line in bad:
        log.warning("skipping unreadable image %s", line)
    return images


def category_labels(model: AtdModel, img: np.ndarray, block: int, layer: int, seed: int = 0) -> np.ndarray:
    """``(H, W)`` argmax category of every LR pixel at the given block/layer."""
    cfg = model.config
    if not 0 <= block < cfg.blocks or not 0 <= layer < cfg.layers_per_block:
        raise ContractError(f"block/layer ({block}, {layer}) out of range for "
                            f"{cfg.blocks} blocks x {cfg.layers_per_block} layers")
    trace: dict = {}
    with no_grad():
        forward(Tensor(img), model, "eval", seed, trace)
    part = trace[("partitions", block, layer)][0]
    return part.labels.reshape(img.shape[-2:])


def category_masks(labels: np.ndarray, dict_size: int) -> np.ndarray:
    return np.stack([labels == k for k in range(dict_size)])


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "loss", "lr"])
        for it, loss, lr in curve:
            w.writerow([it, repr(loss), repr(lr)])


def evaluate_images(model: AtdModel, images: dict[str, np.ndarray], scale: int, seed: int = 0) -> list[dict]:
    """Score SR output and the bicubic baseline against each HR image (Y channel, border = scale)."""
    proto = EvalProtocol(convert_to_y=True, crop_border=scale)
    rows = []
    for name, hr in images.items():
        pair = make_pair(name, hr, scale)
        sr = quantize(upscale(pair.lr, model, seed))
        base = quantize(bicubic_up(pair.lr, scale))
        row = {"image": name, "psnr": psnr(sr, pair.hr, proto), "baseline_psnr": psnr(base, pair.hr, proto)}
        try:
            row["ssim"] = ssim(sr, pair.hr, proto)
            row["baseline_ssim"] = ssim(base, pair.hr, proto)
        except ContractError:
            log.warning("%s too small for SSIM", name)
            row["ssim"] = row["baseline_ssim"] = float("nan")
        rows.append(row)
    return rows


def write_report(path, rows: list[dict]) -> None:
    cols = ["image", "psnr", "ssim", "baseline_psnr", "baseline_ssim"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({k: (row[k] if k == "image" else f"{row[k]:.6f}") for k in cols})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    settings = {"preset": "atd_tiny", "data": None, "synthetic": 0, "out": "runs/train"}
    if args.config:
        settings.update(load_run_config(args.config, TRAIN_SCHEMA))
    cli = {k: v for k, v in vars(args).items() if k in TRAIN_SCHEMA and v is not None}
    settings.update(cli)
    tc_keys = {f.name for f in fields(TrainConfig)}
    tcfg = TrainConfig(**{k: v for k, v in settings.items() if k in tc_keys})

    if settings["data"]:
        images = load_png_dir(settings["data"])
    elif settings["synthetic"]:
        images = synthetic_images(settings["synthetic"], 64, tcfg.seed)
    else:
        raise DataError("give --data DIR or --synthetic N")
    if not images:
        raise DataError("dataset is empty")
    dataset = build_dataset(images, tcfg.scale)

    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(preset(settings["preset"], tcfg.scale), tcfg.seed)

    def on_checkpoint(it, m, opt, rng):
        save_checkpoint(out / f"checkpoint_{it:06d}.atd", Checkpoint.capture(m, opt, rng, it))

    result = train_loop(model, dataset, tcfg, on_checkpoint)
    total = len(result.curve)
    save_checkpoint(out / "checkpoint_final.atd", Checkpoint.capture(model, result.optimizer, result.rng, total))
    write_curve(out / "loss.csv", result.curve)
    print(f"trained {total} iterations; artifacts in {out}")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint).build()
    img = load_png(args.image)
    sr = upscale(img, model, args.seed or 0)
    save_png(args.out, sr)
    print(f"{args.image}: {img.shape[2]}x{img.shape[1]} -> {sr.shape[2]}x{sr.shape[1]} written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    scale = args.scale or ckpt.config.scale
    if scale != ckpt.config.scale:
        raise ContractError(f"checkpoint is x{ckpt.config.scale}, asked to evaluate x{scale}")
    model = ckpt.build()
    images = {n: mod_crop(img, scale) for n, img in load_png_dir(args.hr_dir).items()}
    if not images:
        log.warning("no PNG images in %s; writing an empty report", args.hr_dir)
    rows = evaluate_images(model, images, scale, args.seed or 0)
    write_report(args.out, rows)
    if rows:
        mp = np.mean([r["psnr"] for r in rows])
        mb = np.mean([r["baseline_psnr"] for r in rows])
        print(f"{len(rows)} images: mean PSNR {mp:.3f} dB (bicubic {mb:.3f} dB, gain {mp - mb:+.3f} dB)")
    return 0


def cmd_params(args) -> int:
    scale = args.scale or 2
    n = count_params(build_model(preset(args.preset, scale), args.seed or 0))
    print(f"{args.preset} x{scale}: {n} parameters")
    target = PAPER_PARAMS.get((args.preset, scale))
    if target is not None:
        rel = n / target - 1.0
        verdict = "within" if abs(rel) <= PARAM_TOLERANCE else "OUTSIDE"
        print(f"reported {target}: {rel:+.2%} ({verdict} +-{PARAM_TOLERANCE:.0%})")
    return 0


def cmd_viz_categories(args) -> int:
    model = load_checkpoint(args.checkpoint).build()
    img = load_png(args.image)
    labels = category_labels(model, img, args.block, args.layer, args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    masks = category_masks(labels, model.config.dict_size)
    for k, mask in enumerate(masks):
        save_mask(out / f"category_{k:03d}.png", mask)
    used = int(sum(m.any() for m in masks))
    print(f"wrote {len(masks)} masks to {out} ({used} non-empty)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atdsr", description="Adaptive token dictionary super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="train on a PNG directory or a synthetic toy set")
    common(t)
    t.add_argument("--config", help="key = value run config file")
    t.add_argument("--preset", choices=PRESET_NAMES)
    t.add_argument("--scale", type=int, choices=(2, 3, 4))
    t.add_argument("--data", help="directory of HR PNG images")
    t.add_argument("--synthetic", type=int, help="generate N synthetic 64x64 HR images instead of --data")
    t.add_argument("--out", help="output directory")
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--patch", dest="patch_lr", type=int, help="LR patch side")
    t.add_argument("--warmup", dest="warmup_iters", type=int)
    t.add_argument("--milestones", dest="lr_milestones", type=lambda s: tuple(int(v) for v in s.split(",") if v))
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="upscale one PNG")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("image")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="PSNR/SSIM report against the bicubic baseline")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("hr_dir")
    e.add_argument("--scale", type=int, choices=(2, 3, 4))
    e.add_argument("--out", default="eval.csv")
    e.set_defaults(func=cmd_eval)

    pa = sub.add_parser("params", help="count learnable parameters of a preset")
    common(pa)
    pa.add_argument("--preset", choices=PRESET_NAMES, required=True)
    pa.add_argument("--scale", type=int, choices=(2, 3, 4))
    pa.set_defaults(func=cmd_params)

    v = sub.add_parser("viz-categories", help="one binary mask per dictionary token")
    common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("image")
    v.add_argument("--block", type=int, default=0)
    v.add_argument("--layer", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_categories)
    return p


def _limit_threads():
    n = os.environ.get("ATD_NUM_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.func(args)
    except (ContractError, ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (DataError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
