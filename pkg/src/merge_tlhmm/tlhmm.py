"""Two-layer HMM cascade for situation recognition.

Layer-1 HMMs each model one stage of one (or several) situations and turn a
raw feature window into a length-normalized log-likelihood. The per-step
vector of those scores is the observation of the layer-2 HMMs, one per
situation, whose window log-likelihoods go through a softmax.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import hmm
from ._stats import EmConfig, FitReport, check_finite_matrix

log = logging.getLogger(__name__)

META_MODES = ("vector", "matrix")


@dataclass(frozen=True)
class StageEntry:
    """One layer-1 model: trained on ``stage`` segments of events labelled with any of ``situations``."""

    name: str
    situations: tuple
    stage: str


@dataclass(frozen=True)
class SituationEntry:
    name: str
    situation: str


@dataclass
class Roster:
    layer1: list
    layer2: list

    @property
    def situations(self):
        return [e.situation for e in self.layer2]

    def to_dict(self):
        return {
            "layer1": [{"name": e.name, "situations": list(e.situations), "stage": e.stage} for e in self.layer1],
            "layer2": [{"name": e.name, "situation": e.situation} for e in self.layer2],
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            [StageEntry(d["name"], tuple(d["situations"]), d["stage"]) for d in doc["layer1"]],
            [SituationEntry(d["name"], d["situation"]) for d in doc["layer2"]],
        )


def merging_roster():
    """Seven stage models and two situation models for the ramp-merging case."""
    both = ("main_yields", "merge_yields")
    main, merge = ("main_yields",), ("merge_yields",)
    return Roster(
        layer1=[
            StageEntry("HMM-1-1", both, "ambiguity"),
            StageEntry("HMM-1-2", main, "preparation"),
            StageEntry("HMM-1-3", main, "merging"),
            StageEntry("HMM-1-4", main, "car_following"),
            StageEntry("HMM-1-5", merge, "preparation"),
            StageEntry("HMM-1-6", merge, "merging"),
            StageEntry("HMM-1-7", merge, "car_following"),
        ],
        layer2=[SituationEntry("HMM-2-1", "main_yields"), SituationEntry("HMM-2-2", "merge_yields")],
    )


@dataclass
class TlhmmConfig:
    T1: int = 10
    T2: int = 10
    meta_mode: str = "vector"
    prior: list | None = None
    state_range: tuple = (1, 6)
    layer1_states: int | None = None
    layer2_states: int | None = None
    min_segments: int = 1
    em: EmConfig = field(default_factory=EmConfig)
    seed: int = 0

    def __post_init__(self):
        if self.T1 < 1 or self.T2 < 1:
            raise ValueError("window lengths T1 and T2 must be >= 1")
        if self.meta_mode not in META_MODES:
            raise ValueError(f"meta_mode must be one of {META_MODES}")
        if self.state_range[0] < 1 or self.state_range[0] > self.state_range[1]:
            raise ValueError(f"invalid state range {self.state_range}")
        if self.min_segments < 1:
            raise ValueError("min_segments must be >= 1")

    @property
    def candidates(self):
        return range(self.state_range[0], self.state_range[1] + 1)


@dataclass
class TlhmmModel:
    layer1: list
    layer2: list
    roster: Roster
    T1: int = 10
    T2: int = 10
    meta_mode: str = "vector"
    prior: np.ndarray = None
    extra_columns: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.layer1) < 1 or len(self.layer2) < 2:
            raise ValueError("a cascade needs at least one layer-1 and two layer-2 models")
        if len(self.layer1) != len(self.roster.layer1) or len(self.layer2) != len(self.roster.layer2):
            raise ValueError("roster does not match the number of models")
        if self.prior is None:
            self.prior = np.full(len(self.layer2), 1.0 / len(self.layer2))
        self.prior = np.asarray(self.prior, dtype=float)
        if self.prior.shape != (len(self.layer2),) or abs(self.prior.sum() - 1.0) > 1e-9:
            raise ValueError("prior must be a probability vector over situations")
        dim = self.meta_dim
        for m in self.layer2:
            if m.feature_dim != dim:
                raise ValueError(f"layer-2 model has {m.feature_dim} features, meta features have {dim}")

    @property
    def l(self):
        return len(self.layer1)

    @property
    def h(self):
        return len(self.layer2)

    @property
    def situations(self):
        return self.roster.situations

    @property
    def meta_dim(self):
        return meta_dimension(self.l, self.meta_mode, self.T1) + len(self.extra_columns)

    @property
    def min_length(self):
        return self.T1 + self.T2 - 1


def meta_dimension(l, meta_mode, T1):
    return l if meta_mode == "vector" else l * T1


@dataclass
class MetaFeatureSequence:
    values: np.ndarray
    origin_offset: int

    def __len__(self):
        return self.values.shape[0]


@dataclass
class PosteriorSeries:
    """``times[j]`` is the raw step index of the last observation used for row ``j``."""

    times: np.ndarray
    probabilities: np.ndarray
    labels: list
    dt: float = 0.1

    def __len__(self):
        return self.times.shape[0]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time_s"] + list(self.labels))
            for t, row in zip(self.times, self.probabilities):
                w.writerow([int(t), repr(float(t * self.dt))] + [repr(float(p)) for p in row])

    @classmethod
    def from_csv(cls, path, model=None):
        """Read a file written by ``to_csv`` or ``write_posterior_table``.

        ``model=None`` selects the unprefixed columns; otherwise the columns
        named ``"{model}:{label}"``.
        """
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if model is None:
            cols = [j for j, h in enumerate(header[2:], start=2) if ":" not in h]
            labels = [header[j] for j in cols]
        else:
            cols = [j for j, h in enumerate(header) if h.startswith(model + ":")]
            labels = [header[j][len(model) + 1:] for j in cols]
        if not cols:
            raise ValueError(f"{path}: no posterior columns for model {model!r}")
        times = np.array([int(r[0]) for r in body], dtype=int)
        probs = np.array([[float(r[j]) for j in cols] for r in body]).reshape(len(body), len(cols))
        nz = np.flatnonzero(times)
        dt = float(body[nz[0]][1]) / times[nz[0]] if nz.size else 0.1
        return cls(times, probs, labels, dt)


def write_posterior_table(path, series, primary):
    """Several step-aligned posteriors in one CSV.

    ``series`` maps a model name to its PosteriorSeries. The ``primary``
    model's columns keep the bare labels; the others are named
    ``"{model}:{label}"``.
    """
    ref = series[primary]
    for name, ps in series.items():
        if not np.array_equal(ps.times, ref.times):
            raise ValueError(f"posterior of {name!r} is not aligned with {primary!r}")
    names = [primary] + [n for n in series if n != primary]
    header = ["step", "time_s"]
    for n in names:
        header += [lab if n == primary else f"{n}:{lab}" for lab in series[n].labels]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j, t in enumerate(ref.times):
            row = [int(t), repr(float(t * ref.dt))]
            for n in names:
                row += [repr(float(p)) for p in series[n].probabilities[j]]
            w.writerow(row)


def _raw_values(raw):
    if isinstance(raw, hmm.ObservationSequence):
        return raw.values
    return check_finite_matrix(raw)


def build_meta_features(layer1, raw, T1, meta_mode="vector", extra=None):
    """Sliding-window layer-1 log-likelihoods, divided by window length.

    Row ``j`` describes the window ending at raw step ``j + T1 - 1``. In
    matrix mode each model contributes ``T1`` columns: windows of length
    ``T1, T1-1, ..., 1`` ending at that step.
    """
    X = _raw_values(raw)
    T = X.shape[0]
    if meta_mode not in META_MODES:
        raise ValueError(f"meta_mode must be one of {META_MODES}")
    if T < T1:
        raise ValueError(f"raw sequence has {T} steps; at least T1={T1} are required")
    n = T - T1 + 1
    cols = []
    lengths = [T1] if meta_mode == "vector" else list(range(T1, 0, -1))
    for model in layer1:
        for t in lengths:
            wll = hmm.window_log_likelihoods(model, X, t)
            # window of length t ending at step k starts at k - t + 1
            start = np.arange(T1 - 1, T) - t + 1
            cols.append(wll[start] / t)
    values = np.stack(cols, axis=1)
    if extra is not None:
        extra = check_finite_matrix(extra, "extra columns")
        if extra.shape[0] != T:
            raise ValueError("extra columns must have one row per raw step")
        values = np.hstack([values, extra[T1 - 1:]])
    return MetaFeatureSequence(values, T1 - 1)


def softmax_posterior(log_liks, prior=None):
    L = np.asarray(log_liks, dtype=float)
    if not np.all(np.isfinite(L)):
        raise ValueError("log-likelihoods must be finite")
    prior = np.full(L.shape[-1], 1.0 / L.shape[-1]) if prior is None else np.asarray(prior, dtype=float)
    with np.errstate(divide="ignore"):
        z = L - L.max(axis=-1, keepdims=True) + np.log(prior)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


def layer2_log_likelihoods(model, meta):
    """(n_windows, h) layer-2 window log-likelihoods over a meta-feature sequence."""
    vals = meta.values if isinstance(meta, MetaFeatureSequence) else meta
    return np.stack([hmm.window_log_likelihoods(m, vals, model.T2) for m in model.layer2], axis=1)


def infer(model, raw, extra=None):
    """Posterior over situations at every step that has full windows in both layers."""
    X = _raw_values(raw)
    if X.shape[0] < model.min_length:
        raise ValueError(f"raw sequence has {X.shape[0]} steps; inference needs at least "
                         f"T1 + T2 - 1 = {model.min_length}")
    meta = build_meta_features(model.layer1, X, model.T1, model.meta_mode, extra)
    L2 = layer2_log_likelihoods(model, meta)
    probs = softmax_posterior(L2, model.prior)
    times = np.arange(L2.shape[0]) + model.min_length - 1
    dt = raw.dt if isinstance(raw, hmm.ObservationSequence) else 0.1
    return PosteriorSeries(times, probs, list(model.situations), dt)


def _model_seed(base, index):
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def _fit_one(seqs, config, seed, n_states=None, init=None):
    if init is None and n_states is None:
        n_states = hmm.select_state_count(seqs, config.candidates, config.em, seed)
        total = sum(len(s) for s in seqs)
        n_states = min(n_states, total)
    return hmm.baum_welch_fit(seqs, n_states, config.em, seed=seed, init=init)


def stage_segments(observations, events, entry):
    """Raw-feature slices of ``entry.stage`` from events of ``entry.situations``."""
    segs = []
    for obs, ev in zip(observations, events):
        if ev.situation in entry.situations:
            if ev.stage_boundaries is None:
                raise ValueError(f"event {ev.id} has no stage boundaries and cannot train layer 1")
            segs.append(_raw_values(obs)[ev.stage_slices()[entry.stage]])
    return segs


def train_layer1(observations, events, roster, config):
    models, reports = [], {}
    for i, entry in enumerate(roster.layer1):
        segs = stage_segments(observations, events, entry)
        if len(segs) < config.min_segments:
            raise ValueError(f"roster entry {entry.name} ({entry.stage}, {'/'.join(entry.situations)}) has "
                             f"{len(segs)} training segments; at least {config.min_segments} required")
        model, rep = _fit_one(segs, config, _model_seed(config.seed, i), config.layer1_states)
        models.append(model)
        reports[entry.name] = rep
    return models, reports


def layer2_training_sequences(layer1, observations, events, roster, config, extras=None):
    """Complete-event meta-feature sequences grouped by layer-2 entry."""
    out = []
    for entry in roster.layer2:
        seqs = []
        for k, (obs, ev) in enumerate(zip(observations, events)):
            if ev.situation != entry.situation:
                continue
            X = _raw_values(obs)
            if X.shape[0] < config.T1 + config.T2 - 1:
                log.warning("event %s too short for layer-2 training; skipped", ev.id)
                continue
            extra = None if extras is None else extras[k]
            seqs.append(build_meta_features(layer1, X, config.T1, config.meta_mode, extra).values)
        if len(seqs) < config.min_segments:
            raise ValueError(f"roster entry {entry.name} ({entry.situation}) has {len(seqs)} training "
                             f"sequences; at least {config.min_segments} required")
        out.append(seqs)
    return out


def _train_layer2(layer1, observations, events, roster, config, init=None, extras=None):
    groups = layer2_training_sequences(layer1, observations, events, roster, config, extras)
    models, reports = [], {}
    offset = len(roster.layer1)
    for j, (entry, seqs) in enumerate(zip(roster.layer2, groups)):
        start = None if init is None else init[j]
        model, rep = _fit_one(seqs, config, _model_seed(config.seed, offset + j), config.layer2_states, start)
        # inference windows start mid-event, so start them from the state occupancy
        models.append(hmm.with_initial(model, hmm.state_occupancy(model, seqs)))
        reports[entry.name] = rep
    return models, reports


def train(observations, events, roster=None, config=None, extras=None, extra_columns=()):
    """Train layer 1 on stage segments, then layer 2 on complete-event meta features.

    ``observations[k]`` holds the raw features of ``events[k]`` (labels and
    stage boundaries are read from the event).
    """
    roster = roster or merging_roster()
    config = config or TlhmmConfig()
    if len(observations) != len(events):
        raise ValueError("observations and events must align")
    if not events:
        raise ValueError("empty training set")
    layer1, rep1 = train_layer1(observations, events, roster, config)
    layer2, rep2 = _train_layer2(layer1, observations, events, roster, config, extras=extras)
    model = TlhmmModel(layer1, layer2, roster, config.T1, config.T2, config.meta_mode,
                       config.prior, list(extra_columns))
    return model, {**rep1, **rep2}


TRANSFER_MODES = ("frozen", "finetune", "scratch")


def transfer(pretrained, observations, events, mode, config=None, extras=None):
    """Adapt a trained cascade to a new domain.

    Layer 1 is always retrained on the target data with the pretrained
    roster. Layer 2 is copied (``frozen``), refined by Baum-Welch starting
    from the pretrained parameters (``finetune``) or trained afresh
    (``scratch``).
    """
    if mode not in TRANSFER_MODES:
        raise ValueError(f"mode must be one of {TRANSFER_MODES}")
    config = config or TlhmmConfig(T1=pretrained.T1, T2=pretrained.T2, meta_mode=pretrained.meta_mode)
    roster = pretrained.roster
    target_dim = meta_dimension(len(roster.layer1), config.meta_mode, config.T1) + len(pretrained.extra_columns)
    if mode != "scratch" and target_dim != pretrained.meta_dim:
        raise ValueError(f"cannot reuse layer 2 in {mode} mode: pretrained layer 2 expects "
                         f"{pretrained.meta_dim} meta features but the target configuration "
                         f"(l={len(roster.layer1)}, meta_mode={config.meta_mode}, T1={config.T1}) produces {target_dim}")
    layer1, reports = train_layer1(observations, events, roster, config)
    if mode == "frozen":
        layer2 = [m.copy() for m in pretrained.layer2]
        for e in roster.layer2:
            reports[e.name] = FitReport(0, [], True)
    else:
        init = [m.copy() for m in pretrained.layer2] if mode == "finetune" else None
        layer2, rep2 = _train_layer2(layer1, observations, events, roster, config, init=init, extras=extras)
        reports.update(rep2)
    model = TlhmmModel(layer1, layer2, roster, config.T1, config.T2, config.meta_mode,
                       config.prior if config.prior is not None else pretrained.prior,
                       list(pretrained.extra_columns))
    return model, reports


def layer2_iterations(reports, model_or_roster):
    roster = model_or_roster.roster if isinstance(model_or_roster, TlhmmModel) else model_or_roster
    return {e.name: reports[e.name].iterations for e in roster.layer2}


def save_bundle(directory, model, reports=None, extra=None):
    """Write ``manifest.json`` plus one JSON document per HMM."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "kind": "tlhmm-bundle",
        "roster": model.roster.to_dict(),
        "T1": model.T1,
        "T2": model.T2,
        "meta_mode": model.meta_mode,
        "prior": model.prior.tolist(),
        "extra_columns": list(model.extra_columns),
        "layer1_files": [],
        "layer2_files": [],
    }
    for key, entries, models in (("layer1_files", model.roster.layer1, model.layer1),
                                 ("layer2_files", model.roster.layer2, model.layer2)):
        for entry, m in zip(entries, models):
            fname = f"{entry.name}.json"
            hmm.save_hmm(os.path.join(directory, fname), m)
            manifest[key].append(fname)
    if reports is not None:
        manifest["fit_reports"] = {k: r.to_dict() for k, r in sorted(reports.items())}
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_bundle(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    l1 = [hmm.load_hmm(os.path.join(directory, f)) for f in manifest["layer1_files"]]
    l2 = [hmm.load_hmm(os.path.join(directory, f)) for f in manifest["layer2_files"]]
    return TlhmmModel(l1, l2, Roster.from_dict(manifest["roster"]), manifest["T1"], manifest["T2"],
                      manifest["meta_mode"], manifest["prior"], manifest.get("extra_columns", []))
