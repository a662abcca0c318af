"""Finite-difference gradient check of every registered loss.

    python scripts/grad_suite.py --trials 20
"""
import argparse
import sys

from yoss.trainer import PROBES, grad_check

DIAGNOSTIC = {"constant", "corrupted"}  # self-test probes for the checker itself


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    ok = True
    for name in sorted(set(PROBES) - DIAGNOSTIC):
        report = grad_check(name, args.trials, args.tolerance, args.seed)
        print(report)
        ok &= report.passed
    sys.exit(0 if ok else 1)
