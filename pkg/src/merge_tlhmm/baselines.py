"""Reference recognizers (single-layer HMM, QDA) and recognition metrics.

Both baselines score a raw-feature window of length ``T1 + T2 - 1``, the same
history the cascade consumes, so their posterior rows line up step for step
with :func:`merge_tlhmm.tlhmm.infer`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import hmm
from ._stats import EmConfig, floor_covariance, gaussian_logpdf
from .tlhmm import PosteriorSeries, _model_seed, _raw_values, softmax_posterior

SHRINK_ALPHA = 0.1
SHRINK_RATIO = 5


@dataclass
class SingleHmmClassifier:
    models: list
    labels: list
    window: int

    def predict(self, raw, dt=0.1):
        X = _raw_values(raw)
        if X.shape[0] < self.window:
            raise ValueError(f"sequence has {X.shape[0]} steps; the classifier needs {self.window}")
        L = np.stack([hmm.window_log_likelihoods(m, X, self.window) for m in self.models], axis=1)
        times = np.arange(L.shape[0]) + self.window - 1
        return PosteriorSeries(times, softmax_posterior(L), list(self.labels), dt)

    def to_dict(self):
        return {"kind": "single-hmm", "labels": self.labels, "window": self.window,
                "models": [m.to_dict() for m in self.models]}

    @classmethod
    def from_dict(cls, doc):
        return cls([hmm.HmmParams.from_dict(m) for m in doc["models"]], doc["labels"], doc["window"])


def fit_single_hmm_classifier(observations, events, labels, window, n_states=None,
                              state_range=(1, 6), em=None, seed=0):
    """One HMM per situation over whole-event raw feature sequences."""
    em = em or EmConfig()
    models = []
    for j, label in enumerate(labels):
        seqs = [_raw_values(o) for o, e in zip(observations, events) if e.situation == label]
        if not seqs:
            raise ValueError(f"no training events for situation {label!r}")
        s = _model_seed(seed, 100 + j)
        k = n_states or hmm.select_state_count(seqs, range(state_range[0], state_range[1] + 1), em, s)
        model, _ = hmm.baum_welch_fit(seqs, k, em, seed=s)
        # scored on windows cut anywhere in an event, like the cascade's layer 2
        models.append(hmm.with_initial(model, hmm.state_occupancy(model, seqs)))
    return SingleHmmClassifier(models, list(labels), window)


def _windows(X, window):
    idx = np.arange(X.shape[0] - window + 1)[:, None] + np.arange(window)[None]
    return X[idx].reshape(idx.shape[0], -1)


@dataclass
class QdaClassifier:
    means: np.ndarray
    covariances: np.ndarray
    log_priors: np.ndarray
    labels: list
    window: int
    shrunk: list = field(default_factory=list)

    def log_posterior_terms(self, Z):
        return np.stack([self.log_priors[c] + gaussian_logpdf(Z, self.means[c], self.covariances[c])
                         for c in range(len(self.labels))], axis=1)

    def predict_windows(self, Z):
        return softmax_posterior(self.log_posterior_terms(np.atleast_2d(Z)))

    def predict(self, raw, dt=0.1):
        X = _raw_values(raw)
        if X.shape[0] < self.window:
            raise ValueError(f"sequence has {X.shape[0]} steps; the classifier needs {self.window}")
        Z = _windows(X, self.window)
        times = np.arange(Z.shape[0]) + self.window - 1
        return PosteriorSeries(times, self.predict_windows(Z), list(self.labels), dt)

    def to_dict(self):
        return {"kind": "qda", "labels": self.labels, "window": self.window, "means": self.means.tolist(),
                "covariances": self.covariances.tolist(), "log_priors": self.log_priors.tolist(),
                "shrunk": list(self.shrunk)}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["means"]), np.array(doc["covariances"]), np.array(doc["log_priors"]),
                   doc["labels"], doc["window"], doc.get("shrunk", []))


def fit_qda(samples_by_class, labels, window=1):
    """Per-class full-covariance Gaussian over (already flattened) sample rows.

    Classes with fewer than ``5 * dim`` samples get their covariance shrunk
    10% toward its diagonal.
    """
    means, covs, counts, shrunk = [], [], [], []
    for label, Z in zip(labels, samples_by_class):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        n, d = Z.shape
        if n < 2:
            raise ValueError(f"class {label!r} has {n} samples; at least 2 are needed")
        mu = Z.mean(axis=0)
        S = np.cov(Z.T, bias=True).reshape(d, d)
        if n < SHRINK_RATIO * d:
            S = (1 - SHRINK_ALPHA) * S + SHRINK_ALPHA * np.diag(np.diag(S))
            shrunk.append(label)
        S = floor_covariance(S)
        try:
            np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            raise ValueError(f"covariance of class {label!r} is singular even after shrinkage") from None
        means.append(mu)
        covs.append(S)
        counts.append(n)
    counts = np.asarray(counts, dtype=float)
    return QdaClassifier(np.array(means), np.array(covs), np.log(counts / counts.sum()),
                         list(labels), window, shrunk)


def fit_qda_classifier(observations, events, labels, window):
    """QDA over flattened raw-feature windows of length ``window``."""
    per_class = []
    for label in labels:
        Z = [_windows(_raw_values(o), window) for o, e in zip(observations, events)
             if e.situation == label and len(_raw_values(o)) >= window]
        if not Z:
            raise ValueError(f"no training windows for situation {label!r}")
        per_class.append(np.concatenate(Z, axis=0))
    return fit_qda(per_class, labels, window)


@dataclass
class EventMetrics:
    event_id: str
    correct: bool
    earliest_step: float  # math.inf when the true class never settles above theta
    fluctuation: float  # nan when the true class never exceeds theta


@dataclass
class RecognitionMetrics:
    final_accuracy: float
    mean_earliest_step: float
    mean_fluctuation: float
    n_events: int
    n_never_recognized: int
    n_never_crossed: int
    theta: float
    per_event: list = field(default_factory=list)

    def summary(self):
        return {
            "final_accuracy": self.final_accuracy,
            "mean_earliest_step": self.mean_earliest_step,
            "mean_fluctuation": self.mean_fluctuation,
            "n_events": self.n_events,
            "n_never_recognized": self.n_never_recognized,
            "n_never_crossed": self.n_never_crossed,
            "theta": self.theta,
        }


def earliest_stable_step(times, p, theta):
    """First step from which ``p`` stays at or above ``theta`` until the end, having exceeded it."""
    above = p >= theta
    if not above[-1]:
        return math.inf
    # start of the trailing run of steps at or above theta
    below = np.flatnonzero(~above)
    start = below[-1] + 1 if below.size else 0
    run = p[start:]
    first = start + int(np.argmax(run > theta)) if np.any(run > theta) else None
    return math.inf if first is None else float(times[first])


def fluctuation_after_crossing(p, theta):
    cross = np.flatnonzero(p > theta)
    if cross.size == 0:
        return math.nan
    return float(np.sum(np.abs(np.diff(p[cross[0]:]))))


def evaluate(posteriors, truths, theta=0.7, event_ids=None):
    """Final-step accuracy, earliest stable recognition and post-crossing total variation.

    ``truths[k]`` is the label of ``posteriors[k]``. Events that never settle
    above ``theta`` are left out of the earliest-step mean and counted in
    ``n_never_recognized``; events that never exceed it are left out of the
    fluctuation mean and counted in ``n_never_crossed``.
    """
    if not (0.5 < theta < 1.0):
        raise ValueError("theta must lie in (0.5, 1)")
    if event_ids is None:
        event_ids = [str(i) for i in range(len(posteriors))]
    rows = []
    for eid, ps, truth in zip(event_ids, posteriors, truths):
        j = list(ps.labels).index(truth)
        p = ps.probabilities[:, j]
        correct = int(np.argmax(ps.probabilities[-1])) == j
        rows.append(EventMetrics(eid, bool(correct), earliest_stable_step(ps.times, p, theta),
                                 fluctuation_after_crossing(p, theta)))
    n = len(rows)
    early = [r.earliest_step for r in rows if math.isfinite(r.earliest_step)]
    fluct = [r.fluctuation for r in rows if not math.isnan(r.fluctuation)]
    return RecognitionMetrics(
        final_accuracy=sum(r.correct for r in rows) / n if n else math.nan,
        mean_earliest_step=float(np.mean(early)) if early else math.inf,
        mean_fluctuation=float(np.mean(fluct)) if fluct else math.nan,
        n_events=n,
        n_never_recognized=n - len(early),
        n_never_crossed=n - len(fluct),
        theta=theta,
        per_event=rows,
    )


def _json_number(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_metrics(csv_path, json_path, metrics_by_model):
    """Per-event CSV rows for every model plus an aggregate JSON summary.

    Non-finite aggregates (no event recognized) become ``null`` in the JSON.
    """
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "event_id", "correct", "earliest_step", "fluctuation"])
        for name, m in metrics_by_model.items():
            for r in m.per_event:
                w.writerow([name, r.event_id, int(r.correct), repr(r.earliest_step), repr(r.fluctuation)])
    summary = {name: {k: _json_number(v) for k, v in m.summary().items()}
               for name, m in metrics_by_model.items()}
    with open(json_path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True, allow_nan=False)
    return summary
