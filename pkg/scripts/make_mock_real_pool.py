#!/usr/bin/env python3
"""Write a mock stand-in for a real <root>/<label>/ image tree.

Useful when no clinical image set is at hand: the images come from the mock backend
on a seed stream of their own.
"""

import argparse
from pathlib import Path

from dermsynth.experiment import make_mock_real_pool
from dermsynth.prompts import parse_spec_file

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--spec", default=HERE.parent / "configs" / "conditions.yaml")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--seed", type=int, default=99)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--size", type=int, default=64)
    args = p.parse_args()
    m = make_mock_real_pool(parse_spec_file(args.spec), args.per_class, args.out, args.seed, strength=args.strength, size=args.size)
    print(f"{len(m)} images, classes {m.class_counts()} -> {args.out}")


if __name__ == "__main__":
    main()
