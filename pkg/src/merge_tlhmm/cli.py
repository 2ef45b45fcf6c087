"""Command-line entry point: generate, train, infer, rollout, transfer, evaluate.

Every command reads an optional flat YAML config, applies flag overrides,
validates the result, then writes into a fresh output directory that holds
``manifest.json`` (produced files, effective config, summary) and
``config.yaml`` (the effective config alone).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import __version__, baselines, gmm, scene, tlhmm
from ._stats import EmConfig
from .scenario import (
    EVENT_CSV_COLUMNS,
    SITUATIONS,
    EkfConfig,
    GeneratorParams,
    add_noise,
    extract_features,
    generate_dataset,
    initial_scene_state,
    load_events_csv,
    smooth_event,
    write_events_csv,
)

log = logging.getLogger("merge_tlhmm")

PREPROCESS = ("smooth", "filter", "none")
POSTERIOR_SOURCES = ("tlhmm", "truth", "uniform")
INITIAL_SOURCES = ("truth", "observed")
TRUTH_FILE = "events_truth.csv"
OBSERVED_FILE = "events_observed.csv"


class CliError(Exception):
    """Bad configuration or inputs; reported without a traceback."""


@dataclass
class RunConfig:
    seed: int = 0
    # generate
    n_events: int = 128
    train_fraction: float = 0.8
    noise_pos: float = 0.3
    noise_vel: float = 0.3
    generator: dict = field(default_factory=dict)
    # preprocessing
    train_preprocess: str = "smooth"
    infer_preprocess: str = "filter"
    ekf_accel_psd: float = 0.5
    ekf_sigma_pos: float = 0.5
    ekf_sigma_vel: float = 0.5
    use_lead: bool | None = None
    # recognition
    T1: int = 10
    T2: int = 10
    meta_mode: str = "vector"
    state_range: tuple = (1, 6)
    layer1_states: int | None = None
    layer2_states: int | None = None
    em_tol: float = 1e-4
    em_max_iter: int = 500
    prior: list | None = None
    baselines: bool = False
    allow_train: bool = False
    events: object = "test"
    theta: float = 0.7
    # prediction
    scene_components: int | None = None
    scene_candidates: tuple = (1, 10)
    horizon: int = 30
    n_samples: int = 1000
    rollout_start: object = "midpoints"
    rollout_posterior: str = "tlhmm"
    rollout_initial: str = "truth"
    save_ensembles: bool = True
    grid_cell: float = 0.5
    # transfer
    transfer_modes: tuple = tlhmm.TRANSFER_MODES

    def validate(self):
        def check(cond, msg):
            if not cond:
                raise CliError(f"config: {msg}")

        check(self.n_events >= 0, "n_events must be >= 0")
        check(0.0 <= self.train_fraction <= 1.0, "train_fraction must lie in [0, 1]")
        check(self.noise_pos >= 0 and self.noise_vel >= 0, "noise scales must be >= 0")
        check(self.train_preprocess in PREPROCESS, f"train_preprocess must be one of {PREPROCESS}")
        check(self.infer_preprocess in PREPROCESS, f"infer_preprocess must be one of {PREPROCESS}")
        check(min(self.ekf_accel_psd, self.ekf_sigma_pos, self.ekf_sigma_vel) > 0, "EKF noise terms must be > 0")
        check(self.T1 >= 1 and self.T2 >= 1, "T1 and T2 must be >= 1")
        check(self.meta_mode in tlhmm.META_MODES, f"meta_mode must be one of {tlhmm.META_MODES}")
        check(len(self.state_range) == 2 and 1 <= self.state_range[0] <= self.state_range[1],
              "state_range must be [lo, hi] with 1 <= lo <= hi")
        check(self.em_tol >= 0 and self.em_max_iter >= 0, "em_tol and em_max_iter must be >= 0")
        check(0.5 < self.theta < 1.0, "theta must lie in (0.5, 1)")
        check(self.horizon >= 1 and self.n_samples >= 1, "horizon and n_samples must be >= 1")
        check(len(self.scene_candidates) == 2 and 1 <= self.scene_candidates[0] <= self.scene_candidates[1],
              "scene_candidates must be [lo, hi]")
        check(self.rollout_posterior in POSTERIOR_SOURCES, f"rollout_posterior must be one of {POSTERIOR_SOURCES}")
        check(self.rollout_initial in INITIAL_SOURCES, f"rollout_initial must be one of {INITIAL_SOURCES}")
        check(self.rollout_start == "midpoints" or isinstance(self.rollout_start, int)
              or (isinstance(self.rollout_start, list) and all(isinstance(k, int) for k in self.rollout_start)),
              "rollout_start must be 'midpoints', a step index or a list of step indices")
        check(self.grid_cell > 0, "grid_cell must be > 0")
        check(set(self.transfer_modes) <= set(tlhmm.TRANSFER_MODES) and self.transfer_modes,
              f"transfer_modes must be a non-empty subset of {tlhmm.TRANSFER_MODES}")
        check(self.events in ("test", "train", "all") or isinstance(self.events, list),
              "events must be 'test', 'train', 'all' or a list of event ids")
        try:
            GeneratorParams.from_dict(self.generator)
        except (ValueError, TypeError) as exc:
            raise CliError(f"config: generator: {exc}") from None
        try:
            self.tlhmm_config()
        except ValueError as exc:
            raise CliError(f"config: {exc}") from None
        return self

    def to_dict(self):
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise CliError(f"config: unknown keys {unknown}")
        kw = {}
        for k, v in doc.items():
            kw[k] = tuple(v) if k in ("state_range", "scene_candidates", "transfer_modes") else v
        return cls(**kw)

    def em(self):
        return EmConfig(tol=self.em_tol, max_iter=self.em_max_iter)

    def ekf(self):
        return EkfConfig(self.ekf_accel_psd, self.ekf_sigma_pos, self.ekf_sigma_vel)

    def tlhmm_config(self, **over):
        kw = dict(T1=self.T1, T2=self.T2, meta_mode=self.meta_mode, prior=self.prior,
                  state_range=tuple(self.state_range), layer1_states=self.layer1_states,
                  layer2_states=self.layer2_states, em=self.em(), seed=self.seed)
        kw.update(over)
        return tlhmm.TlhmmConfig(**kw)


def load_config(path, overrides):
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError(f"config {path} must be a mapping")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(doc).validate()


def _seed(base, *index):
    return int(np.random.SeedSequence([base, *index]).generate_state(1)[0])


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


class RunDir:
    """A fresh output directory that tracks what gets written into it."""

    def __init__(self, path, command):
        if path is None:
            stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
            path = os.path.join("runs", f"{command}-{stamp}")
        if os.path.isdir(path) and os.listdir(path):
            raise CliError(f"output directory {path} exists and is not empty")
        try:
            os.makedirs(path, exist_ok=True)
        except OSError as exc:
            raise CliError(f"cannot create output directory {path}: {exc}") from None
        self.path = path
        self.command = command
        self.files = []

    def file(self, *parts):
        rel = os.path.join(*parts)
        full = os.path.join(self.path, rel)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        self.files.append(rel)
        return full

    def track(self, rel_paths):
        self.files.extend(rel_paths)

    def finish(self, cfg, summary=None, inputs=None, errors=None):
        with open(self.file("config.yaml"), "w") as fh:
            yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": cfg.to_dict(),
            "inputs": inputs or {},
            "summary": summary or {},
            "errors": errors or [],
        }
        self.files.append("manifest.json")
        manifest["files"] = sorted(set(self.files))
        with open(os.path.join(self.path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True, allow_nan=False)
        return manifest


def read_manifest(directory, kind):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None
    if manifest.get("command") != kind:
        raise CliError(f"{directory} is not a '{kind}' output (manifest says {manifest.get('command')!r})")
    return manifest


def _input_ref(directory):
    return _sha256(os.path.join(directory, "manifest.json"))


# ---------------------------------------------------------------- dataset I/O

class Dataset:
    def __init__(self, directory):
        self.directory = directory
        self.manifest = read_manifest(directory, "generate")
        truth, diag_t = load_events_csv(os.path.join(directory, TRUTH_FILE))
        observed, diag_o = load_events_csv(os.path.join(directory, OBSERVED_FILE))
        if diag_t or diag_o:
            raise CliError(f"{directory}: malformed events {[d[0] for d in diag_t + diag_o]}")
        self.truth = {e.id: e for e in truth}
        self.observed = {e.id: e for e in observed}
        self.entries = self.manifest["summary"]["events"]
        self.split = {e["id"]: e["split"] for e in self.entries}

    def ids(self, selection):
        if selection in ("train", "test"):
            return [e["id"] for e in self.entries if e["split"] == selection]
        if selection == "all":
            return [e["id"] for e in self.entries]
        missing = [i for i in selection if i not in self.split]
        if missing:
            raise CliError(f"unknown event ids {missing}")
        return list(selection)


def preprocess(event, mode, ekf):
    if mode == "none":
        return event
    return smooth_event(event, ekf, backward=(mode == "smooth"))


def _observations(events, mode, cfg):
    return [extract_features(preprocess(e, mode, cfg.ekf()), cfg.use_lead).observations for e in events]


def n_train_events(n, fraction):
    """Train-split size; halves round toward the training side."""
    return int(math.floor(n * fraction + 0.5 + 1e-9))


# ---------------------------------------------------------------- commands

def cmd_generate(cfg, out):
    params = GeneratorParams.from_dict(cfg.generator)
    run = RunDir(out, "generate")
    events = generate_dataset(cfg.n_events, params, seed=cfg.seed)
    observed = [add_noise(e, cfg.noise_pos, cfg.noise_vel, seed=_seed(cfg.seed, 1, i)) for i, e in enumerate(events)]
    n_train = n_train_events(len(events), cfg.train_fraction)
    order = np.random.default_rng(_seed(cfg.seed, 2)).permutation(len(events))
    train_ids = {events[i].id for i in order[:n_train]}
    write_events_csv(run.file(TRUTH_FILE), events)
    write_events_csv(run.file(OBSERVED_FILE), observed)
    entries = [{"id": e.id, "situation": e.situation, "split": "train" if e.id in train_ids else "test",
                "n_steps": len(e), "stage_boundaries": list(e.stage_boundaries)} for e in events]
    summary = {
        "n_events": len(events),
        "n_train": n_train,
        "n_test": len(events) - n_train,
        "labels": {s: sum(e.situation == s for e in events) for s in SITUATIONS},
        "generator": params.to_dict(),
        "events": entries,
    }
    run.finish(cfg, summary)
    log.info("generated %d events (%d train / %d test) in %s", len(events), n_train, len(events) - n_train, run.path)
    return 0


def cmd_train(cfg, out, data):
    ds = Dataset(data)
    ids = ds.ids("train")
    if not ids:
        raise CliError(f"{data}: no training events")
    events = [ds.observed[i] for i in ids]
    obs = _observations(events, cfg.train_preprocess, cfg)
    run = RunDir(out, "train")
    try:
        model, reports = tlhmm.train(obs, events, config=cfg.tlhmm_config())
    except ValueError as exc:
        raise CliError(f"training failed: {exc}") from None
    manifest = tlhmm.save_bundle(os.path.join(run.path, "tlhmm"), model, reports)
    run.track(os.path.join("tlhmm", f) for f in manifest["layer1_files"] + manifest["layer2_files"] + ["manifest.json"])

    labels = model.situations
    single = baselines.fit_single_hmm_classifier(obs, events, labels, model.min_length,
                                                 state_range=tuple(cfg.state_range), em=cfg.em(), seed=cfg.seed)
    qda = baselines.fit_qda_classifier(obs, events, labels, model.min_length)
    for name, clf in (("single_hmm", single), ("qda", qda)):
        with open(run.file("baselines", f"{name}.json"), "w") as fh:
            json.dump(clf.to_dict(), fh, indent=1)

    feats = [extract_features(preprocess(e, cfg.train_preprocess, cfg.ekf()), cfg.use_lead) for e in events]
    scene_summary = {}
    lo, hi = cfg.scene_candidates
    for j, label in enumerate(labels):
        mine = [f for f, e in zip(feats, events) if e.situation == label]
        S = np.concatenate([f.states for f in mine])
        A = np.concatenate([f.actions for f in mine])
        sm = scene.fit_situation_model(label, S, A, cfg.scene_components, range(lo, hi + 1), cfg.em(),
                                       seed=_seed(cfg.seed, 3, j))
        gmm.save_gmm(run.file("scene", f"{label}.json"), sm.mixture, sm.partition)
        scene_summary[label] = {"n_components": sm.mixture.n_components, "n_rows": int(S.shape[0])}

    by_name = dict(zip([e.name for e in model.roster.layer1 + model.roster.layer2], model.layer1 + model.layer2))
    summary = {
        "n_train_events": len(events),
        "fit_reports": {k: {"iterations": r.iterations, "converged": r.converged,
                            "log_likelihood": r.log_likelihood_trace[-1] if r.log_likelihood_trace else None,
                            "n_states": by_name[k].n_states}
                        for k, r in sorted(reports.items())},
        "scene": scene_summary,
        "baseline_window": model.min_length,
    }
    run.finish(cfg, summary, inputs={"data": _input_ref(data)})
    log.info("trained %d + %d HMMs and %d scene models in %s", model.l, model.h, len(labels), run.path)
    return 0


def load_trained(model_dir, with_baselines=False):
    read_manifest(model_dir, "train")
    model = tlhmm.load_bundle(os.path.join(model_dir, "tlhmm"))
    out = {"tlhmm": model}
    if with_baselines:
        with open(os.path.join(model_dir, "baselines", "single_hmm.json")) as fh:
            out["single_hmm"] = baselines.SingleHmmClassifier.from_dict(json.load(fh))
        with open(os.path.join(model_dir, "baselines", "qda.json")) as fh:
            out["qda"] = baselines.QdaClassifier.from_dict(json.load(fh))
    return out


def _predict(name, clf, obs):
    return tlhmm.infer(clf, obs) if name == "tlhmm" else clf.predict(obs, obs.dt)


def cmd_infer(cfg, out, model_dir, data):
    ds = Dataset(data)
    ids = ds.ids(cfg.events)
    train_ids = [i for i in ids if ds.split[i] == "train"]
    if train_ids and not cfg.allow_train:
        raise CliError(f"refusing to run on training events {train_ids}; pass --allow-train to override")
    models = load_trained(model_dir, cfg.baselines)
    run = RunDir(out, "infer")
    rows, errors = [], []
    for eid in ids:
        try:
            obs = _observations([ds.observed[eid]], cfg.infer_preprocess, cfg)[0]
            series = {name: _predict(name, clf, obs) for name, clf in models.items()}
            rel = os.path.join("posteriors", f"{eid}.csv")
            tlhmm.write_posterior_table(run.file(rel), series, "tlhmm")
            rows.append({"id": eid, "situation": ds.truth[eid].situation, "split": ds.split[eid],
                         "file": rel, "n_rows": len(series["tlhmm"])})
        except ValueError as exc:
            log.error("event %s: %s", eid, exc)
            errors.append({"id": eid, "error": str(exc)})
    summary = {"models": list(models), "labels": list(models["tlhmm"].situations), "events": rows}
    run.finish(cfg, summary, inputs={"model": _input_ref(model_dir), "data": _input_ref(data)}, errors=errors)
    if errors:
        print(f"inference failed for events: {', '.join(e['id'] for e in errors)}", file=sys.stderr)
    return 1 if errors else 0


def cmd_evaluate(cfg, out, posteriors):
    manifest = read_manifest(posteriors, "infer")
    info = manifest["summary"]
    run = RunDir(out, "evaluate")
    by_model = {}
    for name in info["models"]:
        series = [tlhmm.PosteriorSeries.from_csv(os.path.join(posteriors, e["file"]),
                                                 None if name == "tlhmm" else name)
                  for e in info["events"]]
        by_model[name] = baselines.evaluate(series, [e["situation"] for e in info["events"]], cfg.theta,
                                            [e["id"] for e in info["events"]])
    summary = baselines.write_metrics(run.file("metrics.csv"), run.file("summary.json"), by_model)
    errors = manifest.get("errors", [])
    run.finish(cfg, {"metrics": summary, "n_events": len(info["events"])},
               inputs={"posteriors": _input_ref(posteriors)}, errors=errors)
    for name, s in summary.items():
        log.info("%-10s accuracy %.3f  earliest %s  fluctuation %s", name, s["final_accuracy"],
                 s["mean_earliest_step"], s["mean_fluctuation"])
    return 1 if errors else 0


def _start_steps(event, cfg):
    if cfg.rollout_start == "midpoints":
        bounds = (0,) + tuple(event.stage_boundaries) + (len(event),)
        steps = [(bounds[i] + bounds[i + 1]) // 2 for i in range(len(bounds) - 1)]
        # only starts with a full horizon of ground truth ahead
        return [k for k in steps if k + cfg.horizon < len(event)]
    steps = cfg.rollout_start if isinstance(cfg.rollout_start, list) else [cfg.rollout_start]
    bad = [k for k in steps if not 0 <= k < len(event) - 1]
    if bad:
        raise ValueError(f"start steps {bad} outside the event (length {len(event)})")
    return steps


def _rollout_posterior(cfg, model, event_obs, truth, k0):
    labels = list(model.situations)
    if cfg.rollout_posterior == "truth":
        return np.array([1.0 if s == truth.situation else 0.0 for s in labels])
    if cfg.rollout_posterior == "uniform" or k0 + 1 < model.min_length:
        return np.asarray(model.prior, dtype=float)
    obs = _observations([event_obs], cfg.infer_preprocess, cfg)[0]
    head = type(obs)(obs.values[: k0 + 1], obs.dt)
    return tlhmm.infer(model, head).probabilities[-1]


def _write_truth_overlay(path, event, k0, horizon):
    stop = min(len(event), k0 + horizon + 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_CSV_COLUMNS)
        b = ";".join(str(v) for v in event.stage_boundaries) if event.stage_boundaries else ""
        for name, tr in event.agents.items():
            for k in range(k0, stop):
                w.writerow([event.id, event.situation, b, repr(event.dt), name, k,
                            repr(float(tr.x[k])), repr(float(tr.y[k])), repr(float(tr.vy[k]))])


def cmd_rollout(cfg, out, model_dir, data):
    ds = Dataset(data)
    ids = ds.ids(cfg.events)
    model = load_trained(model_dir)["tlhmm"]
    models = []
    for label in model.situations:
        mix, part = gmm.load_gmm(os.path.join(model_dir, "scene", f"{label}.json"))
        models.append(scene.SituationModel(label, mix, part))
    run = RunDir(out, "rollout")

    cont_path = run.file("containment.csv")
    rows, errors, inside_all = [], [], {a: [] for a in scene.AGENTS}
    with open(cont_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["event_id", "start_step", "step", "main_inside", "merge_inside", "both_inside"])
        for n, eid in enumerate(ids):
            truth = ds.truth[eid]
            try:
                starts = _start_steps(truth, cfg)
            except ValueError as exc:
                log.error("event %s: %s", eid, exc)
                errors.append({"id": eid, "error": str(exc)})
                continue
            for k0 in starts:
                try:
                    post = _rollout_posterior(cfg, model, ds.observed[eid], truth, k0)
                    src = truth if cfg.rollout_initial == "truth" else preprocess(ds.observed[eid],
                                                                                   cfg.infer_preprocess, cfg.ekf())
                    init = initial_scene_state(src, k0)
                    ens = scene.rollout(models, post, init, cfg.horizon, cfg.n_samples, truth.dt,
                                        seed=_seed(cfg.seed, 4, n, k0))
                except ValueError as exc:
                    log.error("event %s start %d: %s", eid, k0, exc)
                    errors.append({"id": eid, "start_step": k0, "error": str(exc)})
                    continue
                tag = f"{eid}_k{k0:04d}"
                if cfg.save_ensembles:
                    ens.to_csv(run.file("rollouts", tag, "ensemble.csv"))
                grid = scene.occupancy_heatmap(ens, scene.grid_around(ens, cfg.grid_cell))
                grid.to_csv(run.file("rollouts", tag, "heatmap.csv"))
                _write_truth_overlay(run.file("rollouts", tag, "truth.csv"), truth, k0, cfg.horizon)
                # containment only where ground truth exists
                avail = min(cfg.horizon, len(truth) - 1 - k0)
                flags = {}
                for a in scene.AGENTS:
                    tr = truth.agents[a]
                    T = np.full((cfg.horizon + 1, 2), np.nan)
                    T[: avail + 1, 0] = tr.x[k0:k0 + avail + 1]
                    T[: avail + 1, 1] = tr.y[k0:k0 + avail + 1]
                    flags[a] = scene.ellipse_containment(ens, np.nan_to_num(T), a)[:avail]
                    inside_all[a].extend(flags[a].tolist())
                for k in range(avail):
                    m, g = bool(flags["main"][k]), bool(flags["merge"][k])
                    w.writerow([eid, k0, k0 + k + 1, int(m), int(g), int(m and g)])
                rows.append({"id": eid, "start_step": k0, "posterior": [float(p) for p in post],
                             "both_inside": float(np.mean(flags["main"] & flags["merge"])) if avail else None,
                             "truncated_samples": int(ens.truncated.sum()),
                             "out_of_range": grid.out_of_range})
    both = np.array(inside_all["main"], dtype=bool) & np.array(inside_all["merge"], dtype=bool)
    summary = {
        "n_rollouts": len(rows),
        "containment_both": float(both.mean()) if both.size else None,
        "containment_main": float(np.mean(inside_all["main"])) if both.size else None,
        "containment_merge": float(np.mean(inside_all["merge"])) if both.size else None,
        "rollouts": rows,
    }
    run.finish(cfg, summary, inputs={"model": _input_ref(model_dir), "data": _input_ref(data)}, errors=errors)
    if errors:
        print(f"rollout failed for events: {', '.join(sorted({e['id'] for e in errors}))}", file=sys.stderr)
    return 1 if errors else 0


def cmd_transfer(cfg, out, model_dir, data):
    ds = Dataset(data)
    source = load_trained(model_dir)["tlhmm"]
    train_ids, test_ids = ds.ids("train"), ds.ids("test")
    if not train_ids:
        raise CliError(f"{data}: no training events in the target domain")
    tr_events = [ds.observed[i] for i in train_ids]
    tr_obs = _observations(tr_events, cfg.train_preprocess, cfg)
    te_obs = _observations([ds.observed[i] for i in test_ids], cfg.infer_preprocess, cfg)
    truths = [ds.truth[i].situation for i in test_ids]
    tcfg = cfg.tlhmm_config(T1=source.T1, T2=source.T2, meta_mode=source.meta_mode)
    run = RunDir(out, "transfer")
    report = {}
    for mode in cfg.transfer_modes:
        try:
            model, reps = tlhmm.transfer(source, tr_obs, tr_events, mode, tcfg)
        except ValueError as exc:
            raise CliError(f"transfer ({mode}) failed: {exc}") from None
        man = tlhmm.save_bundle(os.path.join(run.path, mode), model, reps)
        run.track(os.path.join(mode, f) for f in man["layer1_files"] + man["layer2_files"] + ["manifest.json"])
        iters = tlhmm.layer2_iterations(reps, model)
        acc = None
        if test_ids:
            acc = baselines.evaluate([tlhmm.infer(model, o) for o in te_obs], truths, cfg.theta).final_accuracy
        report[mode] = {"layer2_iterations": iters,
                        "mean_layer2_iterations": float(np.mean(list(iters.values()))),
                        "final_accuracy": acc}
    with open(run.file("iterations.csv"), "w") as fh:
        fh.write("mode,model,iterations\n")
        for mode, r in report.items():
            for name, it in r["layer2_iterations"].items():
                fh.write(f"{mode},{name},{it}\n")
    with open(run.file("report.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
    run.finish(cfg, {"transfer": report, "n_target_train": len(train_ids), "n_target_test": len(test_ids)},
               inputs={"model": _input_ref(model_dir), "data": _input_ref(data)})
    for mode, r in report.items():
        log.info("%-8s layer-2 iterations %s accuracy %s", mode, r["layer2_iterations"], r["final_accuracy"])
    return 0


# ---------------------------------------------------------------- argument parsing

def _parse_set(values):
    out = {}
    for item in values or []:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="merge-tlhmm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (must be new or empty)")
    common.add_argument("--verbose", "-v", action="store_true")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize a labelled event dataset")
    g.add_argument("--n-events", type=int)
    g.add_argument("--train-fraction", type=float)

    t = sub.add_parser("train", parents=[common], help="fit the cascade, baselines and scene models")
    t.add_argument("--data", required=True)

    i = sub.add_parser("infer", parents=[common], help="situation posteriors for held-out events")
    i.add_argument("--model", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--baselines", action="store_true", default=None)
    i.add_argument("--allow-train", action="store_true", default=None)
    i.add_argument("--event", action="append", dest="event_ids")

    r = sub.add_parser("rollout", parents=[common], help="Monte-Carlo scene prediction")
    r.add_argument("--model", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--event", action="append", dest="event_ids")
    r.add_argument("--step", type=int)
    r.add_argument("--horizon", type=int)
    r.add_argument("--n-samples", type=int)
    r.add_argument("--posterior", choices=POSTERIOR_SOURCES)

    x = sub.add_parser("transfer", parents=[common], help="frozen / finetune / scratch adaptation")
    x.add_argument("--model", required=True, help="source training run")
    x.add_argument("--data", required=True, help="target dataset")

    e = sub.add_parser("evaluate", parents=[common], help="recognition metrics from an infer run")
    e.add_argument("--posteriors", required=True)
    e.add_argument("--theta", type=float)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        over = _parse_set(args.set)
        over["seed"] = args.seed
        for attr, key in (("n_events", "n_events"), ("train_fraction", "train_fraction"),
                          ("baselines", "baselines"), ("allow_train", "allow_train"), ("theta", "theta"),
                          ("step", "rollout_start"), ("horizon", "horizon"), ("n_samples", "n_samples"),
                          ("posterior", "rollout_posterior"), ("event_ids", "events")):
            if getattr(args, attr, None) is not None:
                over[key] = getattr(args, attr)
        cfg = load_config(args.config, over)
        if args.command == "generate":
            return cmd_generate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.data)
        if args.command == "infer":
            return cmd_infer(cfg, args.out, args.model, args.data)
        if args.command == "rollout":
            return cmd_rollout(cfg, args.out, args.model, args.data)
        if args.command == "transfer":
            return cmd_transfer(cfg, args.out, args.model, args.data)
        return cmd_evaluate(cfg, args.out, args.posteriors)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
