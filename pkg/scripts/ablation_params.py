"""Parameter and MAC table over decoder topology x refinement for a few channel plans.

    python3 scripts/ablation_params.py --size 256
"""
import argparse

from cpdr.network import ARCHS, REFINES, ModelConfig, build_model, count_macs, count_params

PLANS = [((8, 8, 16, 16), 8), ((16, 24, 32, 64), 16), ((32, 32, 64, 96), 32)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--size", type=int, default=96)
    args = ap.parse_args()
    print(f"{'widths':<18}{'D':>4}  {'arch':<5}{'refine':<9}{'params':>10}{'MACs':>14}")
    for widths, d in PLANS:
        for arch in ARCHS:
            for refine in REFINES:
                m = build_model(ModelConfig(backbone_widths=widths, decoder_width=d, arch=arch, refine=refine,
                                            input_size=(args.size, args.size)))
                print(f"{','.join(map(str, widths)):<18}{d:>4}  {arch:<5}{refine:<9}"
                      f"{count_params(m):>10}{count_macs(m):>14}")
        print()


if __name__ == "__main__":
    main()
