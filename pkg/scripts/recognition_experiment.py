"""Generate, train, infer and evaluate on the 128-event synthetic set; print per-model metrics."""

import argparse
import json
import os

from merge_tlhmm import experiments

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--workdir", default="runs/recognition")
    p.add_argument("--config", default=os.path.join(HERE, "..", "configs", "default.yaml"))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    summary = experiments.recognition(args.workdir, args.config, args.seed)
    print(json.dumps(summary, indent=1, sort_keys=True))


if __name__ == "__main__":
    main()
