"""Seeded desk-scale benchmark: init/regime comparison, matcher comparison, classifier geometry.

    python3 scripts/run_benchmark.py --seed 0 --out runs/benchmark.json
"""

import argparse
import json
import time
from pathlib import Path

from osfi.experiments import (ExperimentConfig, build_benchmark, classifier_geometry,
                              compare_inits, evaluate, init_classifier)
from osfi.matcher import MatcherConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    start = time.perf_counter()
    cfg = ExperimentConfig().with_seed(args.seed)
    enc, split, pre = build_benchmark(cfg)
    print(f"pretrain: {pre.epochs} epochs, train accuracy {pre.accuracy:.4f}")

    arms = compare_inits(enc, split, cfg)
    for name, auc in arms.items():
        print(f"{name:12s} AUC {100 * auc:6.2f}")

    matchers = {}
    for m in (MatcherConfig("cosine"), MatcherConfig("nac", cfg.k)):
        res = evaluate(enc, split, m)
        matchers[m.kind] = {"auc": res["auc"], "overlap": res["overlap"]}
        print(f"{m.kind:6s} AUC {100 * res['auc']:6.2f}  histogram overlap {res['overlap']:.4f}")

    geometry = {}
    for init in ("wi", "random"):
        clf, _ = init_classifier(enc, split, init, seed=cfg.seed + 1)
        cm = classifier_geometry(enc, split, clf)
        geometry[init] = {"inter_deg": cm.inter_deg, "intra_deg": cm.intra_deg, "dbi": cm.dbi}
        print(f"{init:6s} rows: inter {cm.inter_deg:6.2f} deg, intra {cm.intra_deg:6.2f} deg, "
              f"DBI {cm.dbi:.3f}")
    print(f"elapsed {time.perf_counter() - start:.1f} s")

    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        report = {"seed": args.seed, "arms_auc": arms, "matchers": matchers, "geometry": geometry,
                  "config": cfg.as_dict()}
        args.out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()
