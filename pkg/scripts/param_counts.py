"""Parameter counts of every preset and scale next to the reported figures."""
from atdsr.cli import PAPER_PARAMS, PARAM_TOLERANCE
from atdsr.model import PRESET_NAMES, build_model, count_params, preset


def main():
    print(f"{'preset':<10} {'scale':>5} {'params':>12} {'reported':>12} {'rel':>8}")
    for name in PRESET_NAMES:
        for scale in (2, 3, 4):
            n = count_params(build_model(preset(name, scale)))
            target = PAPER_PARAMS.get((name, scale))
            if target is None:
                print(f"{name:<10} {scale:>5} {n:>12,}")
                continue
            rel = n / target - 1
            flag = "" if abs(rel) <= PARAM_TOLERANCE else "  <- outside tolerance"
            print(f"{name:<10} {scale:>5} {n:>12,} {target:>12,} {rel:>+8.2%}{flag}")


if __name__ == "__main__":
    main()
