"""Train atd_tiny on synthetic images and report held-out Y-PSNR against bicubic.

    python scripts/train_smoke.py --iters 2000 --every 250
"""
import argparse
import dataclasses

from atdsr.smoke import SmokeConfig, held_out_psnr, run_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--lr", type=float, default=None)
    ap.add_argument("--every", type=int, default=0, help="evaluate every N iterations")
    args = ap.parse_args()

    cfg = SmokeConfig()
    changes = {k: v for k, v in (("iters", args.iters), ("lr", args.lr)) if v is not None}
    if "iters" in changes:
        # keep the halving points at the same fractions of the run
        frac = [m / cfg.train.iters for m in cfg.train.lr_milestones]
        changes["lr_milestones"] = tuple(int(f * changes["iters"]) for f in frac)
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, checkpoint_every=args.every, **changes))

    test = None
    if args.every:
        from atdsr.data import build_dataset, synthetic_images

        test = build_dataset(synthetic_images(cfg.test_images, cfg.image_size, cfg.test_seed, "val"), cfg.train.scale)

    def progress(it, model, *_):
        sr, base = held_out_psnr(model, test, cfg.train.scale)
        print(f"iter {it:5d}  psnr {sr:.3f}  bicubic {base:.3f}  gain {sr - base:+.3f}", flush=True)

    res = run_smoke(cfg, progress if args.every else None)
    print(f"final: psnr {res.sr_psnr:.3f} dB, bicubic {res.bicubic_psnr:.3f} dB, gain {res.gain:+.3f} dB, "
          f"{res.seconds:.0f}s")


if __name__ == "__main__":
    main()
