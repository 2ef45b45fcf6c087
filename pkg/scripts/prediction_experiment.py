"""Monte-Carlo rollouts from the stage midpoints of every test event; print 2-sigma containment.

Needs a finished recognition run (its ``data`` and ``model`` directories).
"""

import argparse
import os

from merge_tlhmm import experiments

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--recognition", default="runs/recognition", help="workdir of recognition_experiment.py")
    p.add_argument("--workdir", default="runs/prediction")
    p.add_argument("--config", default=os.path.join(HERE, "..", "configs", "default.yaml"))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    s = experiments.prediction(args.workdir, os.path.join(args.recognition, "model"),
                               os.path.join(args.recognition, "data"), args.config, args.seed)
    print(f"rollouts: {s['n_rollouts']}")
    print(f"containment  main {s['containment_main']:.3f}  merge {s['containment_merge']:.3f}  "
          f"both {s['containment_both']:.3f}")


if __name__ == "__main__":
    main()
