"""Synthesize a corpus, pretrain, finetune and evaluate for one or more seeds.

    python scripts/run_pipeline.py --config desk-small --seeds 0 1 2 --out runs/desk-small
"""
import argparse
import json
import statistics
import time
from pathlib import Path

from yoss.cli import main


def run(argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise SystemExit(code)


def one_seed(config, data, out: Path, seed: int) -> dict:
    timings = {}
    t0 = time.perf_counter()
    run(["pretrain", "--data", data, "--config", config, "--seed", seed, "--out", out])
    timings["stage1_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    run(["finetune", "--data", data, "--config", config, "--seed", seed, "--init", out / "stage1.yoss", "--out", out])
    timings["stage2_s"] = time.perf_counter() - t0
    run(["eval", "--data", data, "--checkpoint", out / "stage1.yoss", "--mode", "retrieval", "--out", out / "retrieval.json"])
    run(["eval", "--data", data, "--checkpoint", out / "stage2.yoss", "--mode", "zeroshot", "--config", config, "--out", out / "zeroshot.json"])
    ret = json.loads((out / "retrieval.json").read_text())["metrics"]
    zs = json.loads((out / "zeroshot.json").read_text())["metrics"]
    return {
        "a2i_R@1": ret["a2i_R@1"],
        "i2a_R@1": ret["i2a_R@1"],
        "seen_AP50": zs["seen"]["AP50"],
        "heldout_AP50": zs["heldout"]["AP50"] if zs["heldout"] else None,
        **timings,
    }


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="desk-small")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", type=Path, required=True)
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    data = args.out / "data"
    if not (data / "train.jsonl").exists():
        run(["synth", "--config", args.config, "--out", data])
    rows = {}
    for seed in args.seeds:
        rows[seed] = one_seed(args.config, data, args.out / f"seed{seed}", seed)
        print(seed, json.dumps(rows[seed], sort_keys=True))
    summary = {k: statistics.median(r[k] for r in rows.values() if r[k] is not None) for k in next(iter(rows.values()))}
    (args.out / "summary.json").write_text(json.dumps({"seeds": rows, "median": summary}, indent=2, sort_keys=True) + "\n")
    print("median", json.dumps(summary, sort_keys=True))
