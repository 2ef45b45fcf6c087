"""Gaussian-emission hidden Markov models.

Likelihoods are evaluated with a log-space forward recursion; training is
multi-sequence Baum-Welch. Sequences of different lengths are padded and
processed as one batch: a padded step gets emission log-density 0, which
leaves both the forward mass and the backward messages untouched because
transition rows sum to one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from ._stats import (
    EmConfig,
    FitReport,
    check_finite_matrix,
    floor_covariance,
    gaussian_logpdf,
    logsumexp,
    relative_improvement,
)

log = logging.getLogger(__name__)

INIT_JITTER = 1e-2


@dataclass
class ObservationSequence:
    values: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        self.values = check_finite_matrix(self.values)
        if self.values.shape[0] < 1:
            raise ValueError("an observation sequence needs at least one step")

    def __len__(self):
        return self.values.shape[0]

    @property
    def feature_dim(self):
        return self.values.shape[1]


@dataclass
class HmmParams:
    initial: np.ndarray
    transition: np.ndarray
    means: np.ndarray  # (n_states, feature_dim)
    covariances: np.ndarray  # (n_states, feature_dim, feature_dim)
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=float).reshape(-1)
        self.transition = np.atleast_2d(np.asarray(self.transition, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None]
        k, d = self.means.shape
        if self.initial.shape != (k,) or self.transition.shape != (k, k):
            raise ValueError("initial/transition shapes do not match the number of states")
        if self.covariances.shape != (k, d, d):
            raise ValueError("covariance shape does not match means")
        if abs(self.initial.sum() - 1.0) > 1e-9 or np.any(self.initial < 0):
            raise ValueError("initial distribution must sum to 1")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-9) or np.any(self.transition < 0):
            raise ValueError("transition rows must sum to 1")
        self.feature_names = list(self.feature_names)

    @property
    def n_states(self):
        return self.initial.shape[0]

    @property
    def feature_dim(self):
        return self.means.shape[1]

    def log_emissions(self, X):
        X = np.atleast_2d(X)
        out = np.empty((X.shape[0], self.n_states))
        for s in range(self.n_states):
            out[:, s] = gaussian_logpdf(X, self.means[s], self.covariances[s])
        return out

    def copy(self):
        return HmmParams(
            self.initial.copy(),
            self.transition.copy(),
            self.means.copy(),
            self.covariances.copy(),
            list(self.feature_names),
        )

    def to_dict(self):
        return {
            "kind": "hmm",
            "n_states": self.n_states,
            "feature_dim": self.feature_dim,
            "feature_names": self.feature_names,
            "initial": self.initial.tolist(),
            "transition": self.transition.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["initial"], doc["transition"], doc["means"], doc["covariances"],
                   doc.get("feature_names", []))

    def equals(self, other):
        return (
            self.n_states == other.n_states
            and np.array_equal(self.initial, other.initial)
            and np.array_equal(self.transition, other.transition)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covariances, other.covariances)
        )


def save_hmm(path, model):
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)


def load_hmm(path):
    with open(path) as fh:
        return HmmParams.from_dict(json.load(fh))


def _as_values(seq):
    if isinstance(seq, ObservationSequence):
        return seq.values
    return check_finite_matrix(seq)


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _forward(log_pi, log_A, logB):
    """Log-space forward pass over a batch: logB (N, T, K) -> log alpha (N, T, K)."""
    n, T, k = logB.shape
    la = np.empty((n, T, k))
    la[:, 0] = log_pi[None] + logB[:, 0]
    for t in range(1, T):
        la[:, t] = logsumexp(la[:, t - 1, :, None] + log_A[None], axis=1) + logB[:, t]
    return la


def _backward(log_A, logB):
    n, T, k = logB.shape
    lb = np.zeros((n, T, k))
    for t in range(T - 2, -1, -1):
        lb[:, t] = logsumexp(log_A[None] + (logB[:, t + 1] + lb[:, t + 1])[:, None, :], axis=2)
    return lb


def forward_log_likelihood(model, seq):
    """log p(seq | model) in nats."""
    X = _as_values(seq)
    if X.shape[1] != model.feature_dim:
        raise ValueError(f"sequence has {X.shape[1]} features, model expects {model.feature_dim}")
    logB = model.log_emissions(X)[None]
    la = _forward(_log(model.initial), _log(model.transition), logB)
    return logsumexp(la[0, -1])


def window_log_likelihoods(model, seq, window):
    """Forward log-likelihood of every length-``window`` slice of ``seq``.

    Entry ``i`` scores ``values[i:i + window]``. All windows run as one batch.
    """
    X = _as_values(seq)
    if X.shape[1] != model.feature_dim:
        raise ValueError(f"sequence has {X.shape[1]} features, model expects {model.feature_dim}")
    T = X.shape[0]
    if window < 1 or T < window:
        raise ValueError(f"sequence of length {T} is shorter than the window {window}")
    logB = model.log_emissions(X)
    idx = np.arange(T - window + 1)[:, None] + np.arange(window)[None]
    la = _forward(_log(model.initial), _log(model.transition), logB[idx])
    return logsumexp(la[:, -1], axis=1)


def _pad_batch(model, seqs):
    lengths = np.array([len(s) for s in seqs])
    T = int(lengths.max())
    logB = np.zeros((len(seqs), T, model.n_states))
    for i, X in enumerate(seqs):
        logB[i, : len(X)] = model.log_emissions(X)
    mask = np.arange(T)[None] < lengths[:, None]
    return logB, mask


def _e_step(model, seqs):
    logB, mask = _pad_batch(model, seqs)
    log_pi = _log(model.initial)
    log_A = _log(model.transition)
    la = _forward(log_pi, log_A, logB)
    lb = _backward(log_A, logB)
    ll_seq = logsumexp(la[:, -1], axis=1)
    gamma = np.exp(la + lb - ll_seq[:, None, None]) * mask[..., None]
    # xi summed over time, restricted to transitions between real steps
    trans_mask = mask[:, 1:]
    xi_sum = np.zeros_like(model.transition)
    for t in range(logB.shape[1] - 1):
        lx = (la[:, t, :, None] + log_A[None]
              + (logB[:, t + 1] + lb[:, t + 1])[:, None, :] - ll_seq[:, None, None])
        xi_sum += np.sum(np.exp(lx) * trans_mask[:, t, None, None], axis=0)
    return gamma, xi_sum, float(ll_seq.sum())


def _m_step(model, seqs, gamma, xi_sum, floor):
    k, d = model.n_states, model.feature_dim
    initial = gamma[:, 0].sum(axis=0)
    initial = initial / initial.sum()
    transition = model.transition.copy()
    row = xi_sum.sum(axis=1)
    live = row > 0
    transition[live] = xi_sum[live] / row[live, None]

    X = np.concatenate(seqs, axis=0)
    G = np.concatenate([gamma[i, : len(s)] for i, s in enumerate(seqs)], axis=0)
    mass = G.sum(axis=0)
    means = model.means.copy()
    covs = model.covariances.copy()
    for s in range(k):
        if mass[s] <= 1e-10:
            continue
        means[s] = G[:, s] @ X / mass[s]
        diff = X - means[s]
        covs[s] = floor_covariance((G[:, s, None] * diff).T @ diff / mass[s], floor)
    return HmmParams(initial, transition, means, covs, model.feature_names)


def initialize(seqs, n_states, config=None, seed=0, feature_names=None):
    """GMM-seeded emissions, near-uniform initial and transition probabilities."""
    config = config or EmConfig()
    rng = np.random.default_rng(seed)
    X = np.concatenate(seqs, axis=0)
    mix, _ = gmm.em_fit(X, n_states, EmConfig(tol=config.tol, max_iter=200, cov_floor=config.cov_floor),
                        seed=int(rng.integers(2**31)))
    initial = 1.0 / n_states + INIT_JITTER * rng.random(n_states)
    transition = 1.0 / n_states + INIT_JITTER * rng.random((n_states, n_states))
    return HmmParams(
        initial / initial.sum(),
        transition / transition.sum(axis=1, keepdims=True),
        mix.means,
        mix.covariances,
        feature_names or [],
    )


def baum_welch_fit(seqs, n_states=None, config=None, seed=0, init=None, feature_names=None):
    """Fit a Gaussian HMM to a list of sequences.

    With ``init`` given, training starts from those parameters (``n_states``
    is then taken from ``init``). The trace starts with the log-likelihood of
    the starting point; one entry is appended per EM iteration.
    """
    config = config or EmConfig()
    if not seqs:
        raise ValueError("no training sequences")
    seqs = [_as_values(s) for s in seqs]
    dims = {s.shape[1] for s in seqs}
    if len(dims) != 1:
        raise ValueError(f"sequences disagree on feature dimension: {sorted(dims)}")
    if init is not None:
        if init.feature_dim != seqs[0].shape[1]:
            raise ValueError("initial model feature dimension does not match the data")
        model = init.copy()
    else:
        if n_states is None or n_states < 1:
            raise ValueError("n_states must be >= 1")
        total = sum(len(s) for s in seqs)
        if total < n_states:
            raise ValueError(f"{total} observations cannot support {n_states} states")
        model = initialize(seqs, n_states, config, seed, feature_names)

    gamma, xi_sum, ll = _e_step(model, seqs)
    report = FitReport(0, [ll], False)
    for _ in range(config.max_iter):
        model = _m_step(model, seqs, gamma, xi_sum, config.cov_floor)
        gamma, xi_sum, ll = _e_step(model, seqs)
        report.log_likelihood_trace.append(ll)
        report.iterations += 1
        if relative_improvement(report.log_likelihood_trace[-2], ll) < config.tol:
            report.converged = True
            break
    log.debug("baum-welch: %d states, %d iterations, ll=%.6g", model.n_states, report.iterations, ll)
    return model, report


def state_occupancy(model, seqs):
    """Average posterior state probability over every step of ``seqs``.

    This is the distribution of the hidden state at a uniformly chosen time,
    the appropriate start distribution for windows cut from the middle of a
    sequence.
    """
    seqs = [_as_values(s) for s in seqs]
    gamma, _, _ = _e_step(model, seqs)
    occ = gamma.sum(axis=(0, 1))
    return occ / occ.sum()


def with_initial(model, initial):
    out = model.copy()
    out.initial = np.asarray(initial, dtype=float) / np.sum(initial)
    return out


def select_state_count(samples, candidate_range, config=None, seed=0):
    """Number of hidden states = mixture size with the highest BIC on pooled samples."""
    if isinstance(samples, (list, tuple)):
        samples = np.concatenate([_as_values(s) for s in samples], axis=0)
    count, _, _ = gmm.select_components_by_bic(samples, candidate_range, config, seed)
    return count


__all__ = [
    "EmConfig",
    "FitReport",
    "HmmParams",
    "ObservationSequence",
    "baum_welch_fit",
    "forward_log_likelihood",
    "initialize",
    "load_hmm",
    "save_hmm",
    "select_state_count",
    "state_occupancy",
    "with_initial",
    "window_log_likelihoods",
]
