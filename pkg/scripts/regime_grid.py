"""AUC for every classifier init crossed with every fine-tuning regime, cosine and NAC.

    python3 scripts/regime_grid.py --seed 0 --epochs 420
"""

import argparse
from dataclasses import replace

from osfi.experiments import INITS, ExperimentConfig, adapt, build_benchmark, score_auc
from osfi.matcher import MatcherConfig

MODES = ("none", "full", "partial", "adapter", "bn")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=ExperimentConfig.finetune_epochs)
    args = ap.parse_args()

    cfg = replace(ExperimentConfig().with_seed(args.seed), finetune_epochs=args.epochs)
    enc, split, _ = build_benchmark(cfg)
    print("init,mode,trainable,auc_cos,auc_nac")
    for init in INITS:
        for mode in MODES:
            tuned, _, info = adapt(enc, split, init, mode, cfg)
            cos = score_auc(tuned, split, MatcherConfig("cosine"))
            nac = score_auc(tuned, split, MatcherConfig("nac", cfg.k))
            trainable = info["parameters"]["trainable"] if mode != "none" else 0
            print(f"{init},{mode},{trainable},{cos:.4f},{nac:.4f}")


if __name__ == "__main__":
    main()
