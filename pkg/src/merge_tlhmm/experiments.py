"""Seeded end-to-end experiments driven through the command-line interface.

Each function writes its runs under ``workdir`` and returns the numbers the
acceptance suite and the scripts in ``scripts/`` check.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .cli import main
from .scenario import EkfConfig, ekf_smooth


def _run(*argv):
    code = main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"merge-tlhmm {' '.join(map(str, argv))} exited with {code}")


def _summary(run_dir):
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        return json.load(fh)["summary"]


def recognition(workdir, config=None, seed=0):
    """generate -> train -> infer (with baselines) -> evaluate. Returns per-model metrics."""
    cfg = ["--config", config] if config else []
    d = lambda name: os.path.join(workdir, name)  # noqa: E731
    _run("generate", *cfg, "--seed", seed, "--out", d("data"))
    _run("train", *cfg, "--seed", seed, "--data", d("data"), "--out", d("model"))
    _run("infer", *cfg, "--seed", seed, "--model", d("model"), "--data", d("data"), "--baselines",
         "--out", d("infer"))
    _run("evaluate", *cfg, "--seed", seed, "--posteriors", d("infer"), "--out", d("evaluate"))
    with open(os.path.join(d("evaluate"), "summary.json")) as fh:
        return json.load(fh)


def prediction(workdir, model_dir, data_dir, config=None, seed=0):
    """Rollouts from the stage midpoints of every test event, true situation known."""
    cfg = ["--config", config] if config else []
    out = os.path.join(workdir, "rollout")
    _run("rollout", *cfg, "--seed", seed, "--model", model_dir, "--data", data_dir, "--posterior", "truth",
         "--set", "save_ensembles=false", "--out", out)
    return _summary(out)


def transfer(workdir, model_dir, target_config, replicates=5, config=None, seed=0):
    """One target dataset and one frozen/finetune/scratch run per replicate."""
    cfg = ["--config", config] if config else []
    rows = []
    for r in range(replicates):
        data = os.path.join(workdir, f"target-{r}")
        _run("generate", "--config", target_config, "--seed", 1000 * (r + 1) + seed, "--out", data)
        out = os.path.join(workdir, f"transfer-{r}")
        _run("transfer", *cfg, "--seed", seed + r, "--model", model_dir, "--data", data, "--out", out)
        with open(os.path.join(out, "report.json")) as fh:
            rows.append(json.load(fh))
    return rows


def ekf_benefit(n_tracks=100, seed=0, n_steps=100, dt=0.1, sigma=0.5):
    """(raw RMSE, smoothed RMSE) on noisy constant-velocity tracks."""
    rng = np.random.default_rng(seed)
    cfg = EkfConfig(sigma_pos=sigma)
    out = []
    for _ in range(n_tracks):
        v = rng.uniform(5.0, 30.0)
        truth = rng.uniform(-50.0, 50.0) + v * dt * np.arange(n_steps)
        z = truth + rng.normal(0.0, sigma, n_steps)
        sm, _ = ekf_smooth(z, dt, config=cfg)
        out.append((float(np.sqrt(np.mean((z - truth) ** 2))), float(np.sqrt(np.mean((sm - truth) ** 2)))))
    return out
