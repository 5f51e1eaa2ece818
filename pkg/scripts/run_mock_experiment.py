#!/usr/bin/env python3
"""Build the mock real pool if needed, then run all three protocols on configs/mock_experiment.yaml."""

import argparse
import logging
import time
from pathlib import Path

from dermsynth.experiment import ExperimentConfig, make_mock_real_pool, run_experiment
from dermsynth.prompts import parse_spec_file

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=HERE.parent / "configs" / "mock_experiment.yaml")
    p.add_argument("--real-per-class", type=int, default=60)
    p.add_argument("--deterministic", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")

    cfg = ExperimentConfig.load(args.config)
    if args.deterministic:
        cfg.deterministic = True
    if not cfg.real_root.is_dir():
        make_mock_real_pool(parse_spec_file(cfg.spec_file), args.real_per_class, cfg.real_root, seed=99)
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    print((result.out_dir / "comparison.md").read_text())
    print(f"{time.perf_counter() - t0:.0f} s; results in {result.out_dir}")


if __name__ == "__main__":
    main()
