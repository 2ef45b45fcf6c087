"""Frozen / finetune / scratch transfer to the shifted target domain, several replicates.

Needs a finished recognition run (its ``model`` directory is the source).
"""

import argparse
import os

from merge_tlhmm import experiments

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--recognition", default="runs/recognition")
    p.add_argument("--workdir", default="runs/transfer")
    p.add_argument("--config", default=os.path.join(HERE, "..", "configs", "default.yaml"))
    p.add_argument("--target", default=os.path.join(HERE, "..", "configs", "transfer_target.yaml"))
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rows = experiments.transfer(args.workdir, os.path.join(args.recognition, "model"), args.target,
                                args.replicates, args.config, args.seed)
    print("replicate  mode      layer-2 iterations  accuracy")
    for r, rep in enumerate(rows):
        for mode, m in rep.items():
            print(f"{r:9d}  {mode:8s}  {m['mean_layer2_iterations']:18.1f}  {m['final_accuracy']:.3f}")


if __name__ == "__main__":
    main()
