#!/usr/bin/env python
"""Accuracy ceilings of the synthetic task: the joint rule against each single statistic.

    python scripts/task_ceilings.py --noise 0 0.5 1 2
"""
import argparse

from itcrwkv.synth import SynthConfig, best_marginal_accuracy, generate, joint_rule_accuracy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--noise", type=float, nargs="+", default=[0.0, 0.5, 1.0, 2.0])
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--count", type=int, default=400)
    args = ap.parse_args()
    print(f"{'noise':>6} {'joint':>7} {'cell':>7} {'context':>8}")
    for noise in args.noise:
        cfg = SynthConfig(n_classes=args.classes, noise=noise)
        s = generate(cfg, args.count)
        print(f"{noise:6.2f} {joint_rule_accuracy(s, cfg):7.3f} {best_marginal_accuracy(s, cfg, 'cell'):7.3f} "
              f"{best_marginal_accuracy(s, cfg, 'context'):8.3f}")


if __name__ == "__main__":
    main()
