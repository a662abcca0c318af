"""Stage-1 alignment ablation: contrastive only, + pair term, + pair + CORAL.

    python scripts/ablation.py --config desk-small --seeds 0 1 2 --out runs/ablation
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from yoss.cli import load_recipe
from yoss.datamodel import read_manifest
from yoss.synthdata import generate_corpus
from yoss.trainer import Stage1Data, pretrain_stage1, retrieval_metrics

VARIANTS = {"baseline": {"eta_align": 0.0}, "+pair": {"lambda_coral": 0.0}, "++coral": {}}


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="desk-small")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", type=Path, required=True)
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    recipe = load_recipe(args.config)
    data = args.out / "data"
    if not (data / "train.jsonl").exists():
        generate_corpus(recipe.corpus_config(), data)
    val, _ = read_manifest(data, "val")
    table = {}
    for name, override in VARIANTS.items():
        table[name] = {}
        for seed in args.seeds:
            cfg = recipe.train_config(1, seed, epochs=args.epochs, **override)
            t0 = time.perf_counter()
            model, log = pretrain_stage1(data, cfg)
            m = retrieval_metrics(model, Stage1Data.from_samples(val, model), cfg.retrieval_fold)
            table[name][seed] = {"a2i_R@1": m["a2i_R@1"], "i2a_R@1": m["i2a_R@1"], "seconds": time.perf_counter() - t0}
            log.write(args.out / f"{name}_seed{seed}_log.csv")
            print(name, seed, json.dumps(table[name][seed], sort_keys=True))
    means = {n: float(np.mean([(r["a2i_R@1"] + r["i2a_R@1"]) / 2 for r in rows.values()])) for n, rows in table.items()}
    (args.out / "ablation.json").write_text(json.dumps({"runs": table, "mean_R@1": means}, indent=2, sort_keys=True) + "\n")
    for n, v in means.items():
        print(f"{n:10s} mean R@1 {v:.3f}")
