#!/usr/bin/env python3
"""End-to-end planted-signal experiment: synth -> train -> eval -> baselines.

Drives the CLI commands against a config (default configs/planted_n6.json)
and prints a comparison of the learned policy against the exhaustive oracle,
prefix-ordered beam search, and random fixed-size subsets.

Usage:
    python scripts/run_planted_experiment.py [--config PATH] [--seed N]
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from scalesel.cli import main as cli

REPO = Path(__file__).resolve().parents[1]


def run(args: list[str]) -> None:
    code = cli(args)
    if code != 0:
        sys.exit(code)


def best_row(csv_path: Path) -> tuple[tuple[int, ...], float]:
    best = None
    with open(csv_path) as fh:
        for row in csv.DictReader(fh):
            subset = tuple(int(t) for t in row["subset"].split(";"))
            score = float(row["score"])
            key = (-score, len(subset), subset)
            if best is None or key < best[0]:
                best = (key, subset, score)
    return best[1], best[2]


def mean_score(csv_path: Path) -> float:
    with open(csv_path) as fh:
        scores = [float(row["score"]) for row in csv.DictReader(fh)]
    return sum(scores) / len(scores)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(REPO / "configs/planted_n6.json"))
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args()

    common = ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]

    print("== generating synthetic pairs ==")
    run(["synth", *common])
    print("== training the selection policy ==")
    run(["train", *common])
    print("== evaluating the greedy policy ==")
    run(["eval", *common])
    print("== baselines ==")
    run(["oracle", *common])
    run(["beam", *common])
    run(["random", *common])

    cfg = json.loads(Path(args.config).read_text())
    out_dir = Path(args.config).parent / cfg["paths"]["out_dir"]
    report = json.loads((out_dir / "eval.json").read_text())
    oracle_subset, oracle_score = best_row(out_dir / "oracle.csv")
    beam_subset, beam_score = best_row(out_dir / "beam.csv")
    rand_mean = mean_score(out_dir / "random.csv")

    beta = cfg.get("env", {}).get("beta", 20.0)
    cost = cfg.get("env", {}).get("costs", 0.4)
    print("\n== summary ==")
    print(f"policy subset:      {report['subset']}  mean PCK {report['mean_pck']:.3f}  "
          f"return {report['total_return']:.3f}")
    if "greedy" in report:
        print(f"mean greedy return: {report['greedy']['mean_return']:.3f}  "
              f"mean subset size {report['greedy']['mean_subset_size']:.2f}")
    oracle_return = beta * oracle_score - cost * len(oracle_subset)
    print(f"oracle subset:      {list(oracle_subset)}  score {oracle_score:.3f}  "
          f"return {oracle_return:.3f}")
    print(f"beam best:          {list(beam_subset)}  score {beam_score:.3f}")
    print(f"random mean score:  {rand_mean:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
