"""Repeat the init/regime comparison over several seeds to gauge its spread.

    python3 scripts/seed_sweep.py --seeds 0 1 2 3 4
"""

import argparse

from osfi.experiments import ExperimentConfig, build_benchmark, compare_inits


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    args = ap.parse_args()
    print("seed,pretrained,random_full,wi_bn")
    for seed in args.seeds:
        cfg = ExperimentConfig().with_seed(seed)
        enc, split, _ = build_benchmark(cfg)
        arms = compare_inits(enc, split, cfg)
        print(f"{seed},{arms['wi+none']:.4f},{arms['random+full']:.4f},{arms['wi+bn']:.4f}")


if __name__ == "__main__":
    main()
