"""Full-covariance Gaussian mixtures: EM fitting, BIC, block conditioning, sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ._stats import (
    COV_FLOOR,
    EmConfig,
    FitReport,
    check_finite_matrix,
    floor_covariance,
    gaussian_logpdf,
    logsumexp,
    relative_improvement,
)

log = logging.getLogger(__name__)

COLLAPSE_MASS = 1e-10


@dataclass
class GmmParams:
    weights: np.ndarray
    means: np.ndarray  # (K, d)
    covariances: np.ndarray  # (K, d, d)
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None]
        k, d = self.means.shape
        if self.weights.shape != (k,) or self.covariances.shape != (k, d, d):
            raise ValueError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9 or np.any(self.weights < 0):
            raise ValueError("mixture weights must form a probability vector")
        self.feature_names = list(self.feature_names)

    @property
    def n_components(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_parameters(self):
        d = self.dim
        k = self.n_components
        return (k - 1) + k * (d + d * (d + 1) // 2)

    def mean(self):
        return self.weights @ self.means

    def to_dict(self):
        return {
            "kind": "gmm",
            "n_components": self.n_components,
            "dim": self.dim,
            "feature_names": self.feature_names,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            weights=doc["weights"],
            means=doc["means"],
            covariances=doc["covariances"],
            feature_names=doc.get("feature_names", []),
        )


@dataclass(frozen=True)
class BlockPartition:
    """Splits a joint vector into a conditioning block and a predicted block."""

    se_indices: tuple
    a_indices: tuple

    def __post_init__(self):
        object.__setattr__(self, "se_indices", tuple(int(i) for i in self.se_indices))
        object.__setattr__(self, "a_indices", tuple(int(i) for i in self.a_indices))
        se, a = set(self.se_indices), set(self.a_indices)
        if se & a:
            raise ValueError("block index sets overlap")
        if se | a != set(range(len(se) + len(a))) or len(se) != len(self.se_indices):
            raise ValueError("block index sets must partition 0..dim-1")

    @property
    def dim(self):
        return len(self.se_indices) + len(self.a_indices)

    def to_dict(self):
        return {"se_indices": list(self.se_indices), "a_indices": list(self.a_indices)}

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["se_indices"], doc["a_indices"])


def save_gmm(path, model, partition=None):
    doc = model.to_dict()
    if partition is not None:
        doc["partition"] = partition.to_dict()
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_gmm(path):
    """Returns ``(GmmParams, BlockPartition or None)``."""
    with open(path) as fh:
        doc = json.load(fh)
    part = BlockPartition.from_dict(doc["partition"]) if "partition" in doc else None
    return GmmParams.from_dict(doc), part


def component_log_densities(model, X):
    """(n, K) matrix of log pi_g + log N(x; mu_g, Sigma_g)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty((X.shape[0], model.n_components))
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    for g in range(model.n_components):
        out[:, g] = logw[g] + gaussian_logpdf(X, model.means[g], model.covariances[g])
    return out


def log_density(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"expected dimension {model.dim}, got {x.shape[-1]}")
    if x.ndim == 1:
        return logsumexp(component_log_densities(model, x[None])[0])
    return logsumexp(component_log_densities(model, x), axis=1)


def total_log_likelihood(model, X):
    return float(np.sum(log_density(model, np.atleast_2d(X))))


def bic_score(model, data):
    data = check_finite_matrix(data, "data")
    if data.shape[1] != model.dim:
        raise ValueError(f"data dimension {data.shape[1]} != model dimension {model.dim}")
    n = data.shape[0]
    return 2.0 * total_log_likelihood(model, data) - model.n_parameters * np.log(n)


def _kmeans_pp_seeds(X, k, rng):
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - X.mean(axis=0)) / scale
    idx = [int(rng.integers(X.shape[0]))]
    d2 = np.sum((Z - Z[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(X.shape[0]))
        else:
            nxt = int(np.searchsorted(np.cumsum(d2), rng.random() * total))
            nxt = min(nxt, X.shape[0] - 1)
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((Z - Z[nxt]) ** 2, axis=1))
    return np.array(idx)


def _init_params(X, k, rng, floor):
    d = X.shape[1]
    seeds = _kmeans_pp_seeds(X, k, rng)
    var = X.var(axis=0) if X.shape[0] > 1 else np.ones(d)
    base = floor_covariance(np.diag(np.maximum(var, floor)), floor)
    return GmmParams(
        weights=np.full(k, 1.0 / k),
        means=X[seeds].copy(),
        covariances=np.repeat(base[None], k, axis=0),
    )


def _m_step(X, resp, prev, rng, floor):
    n, d = X.shape
    mass = resp.sum(axis=0)
    k = resp.shape[1]
    weights = mass / n
    means = np.empty((k, d))
    covs = np.empty((k, d, d))
    for g in range(k):
        if mass[g] < COLLAPSE_MASS:
            j = int(rng.integers(n))
            log.info("component %d collapsed (mass %.3g); re-seeded at sample %d", g, mass[g], j)
            means[g] = X[j]
            covs[g] = prev.covariances[g]
            weights[g] = max(weights[g], 1.0 / n)
            continue
        means[g] = resp[:, g] @ X / mass[g]
        diff = X - means[g]
        covs[g] = floor_covariance((resp[:, g, None] * diff).T @ diff / mass[g], floor)
    weights = weights / weights.sum()
    return GmmParams(weights, means, covs, prev.feature_names)


def em_fit(data, n_components, config=None, seed=0, feature_names=None):
    """Fit a ``n_components`` mixture to the rows of ``data`` by EM.

    The trace starts with the log-likelihood of the initialization, so
    ``len(trace) == iterations + 1``.
    """
    config = config or EmConfig()
    X = check_finite_matrix(data, "data")
    if X.shape[0] == 0:
        raise ValueError("cannot fit a mixture to empty data")
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    if X.shape[0] < n_components:
        raise ValueError(f"{X.shape[0]} samples cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    params = _init_params(X, n_components, rng, config.cov_floor)
    if feature_names is not None:
        params.feature_names = list(feature_names)

    comp = component_log_densities(params, X)
    norm = logsumexp(comp, axis=1)
    trace = [float(norm.sum())]
    report = FitReport(0, trace, False)
    for _ in range(config.max_iter):
        resp = np.exp(comp - norm[:, None])
        params = _m_step(X, resp, params, rng, config.cov_floor)
        comp = component_log_densities(params, X)
        norm = logsumexp(comp, axis=1)
        trace.append(float(norm.sum()))
        report.iterations += 1
        if relative_improvement(trace[-2], trace[-1]) < config.tol:
            report.converged = True
            break
    return params, report


def select_components_by_bic(data, candidates, config=None, seed=0):
    """Fit one mixture per candidate count and keep the highest BIC.

    Returns ``(best_count, best_model, scores)`` where ``scores`` maps each
    successfully fitted count to its BIC.
    """
    X = check_finite_matrix(data, "data")
    candidates = sorted(set(int(c) for c in candidates))
    if not candidates:
        raise ValueError("empty candidate range")
    scores = {}
    best = None
    for k in candidates:
        try:
            model, _ = em_fit(X, k, config, seed=seed)
            score = bic_score(model, X)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("BIC candidate %d skipped: %s", k, exc)
            continue
        if not np.isfinite(score):
            log.warning("BIC candidate %d skipped: non-finite score", k)
            continue
        scores[k] = score
        # strict '>' keeps the smaller count on ties
        if best is None or score > best[2]:
            best = (k, model, score)
    if best is None:
        raise RuntimeError(f"every candidate in {candidates} failed to fit")
    return best[0], best[1], scores


class Conditioner:
    """Precomputed Gaussian-mixture regression of the action block on the SE block.

    Per component the conditional covariance does not depend on the SE value,
    so gains and Cholesky factors are computed once and reused for batches.
    """

    def __init__(self, model, part):
        if part.dim != model.dim:
            raise ValueError("partition dimension does not match model dimension")
        se = np.array(part.se_indices, dtype=int)
        a = np.array(part.a_indices, dtype=int)
        self.model = model
        self.part = part
        self.se_dim = len(se)
        self.a_dim = len(a)
        k = model.n_components
        self.mu_se = model.means[:, se]
        self.mu_a = model.means[:, a]
        self.cov_se = np.empty((k, len(se), len(se)))
        self.gain = np.empty((k, len(a), len(se)))
        self.cond_cov = np.empty((k, len(a), len(a)))
        self.cond_chol = np.empty((k, len(a), len(a)))
        for g in range(k):
            S = model.covariances[g]
            s_se = floor_covariance(S[np.ix_(se, se)])
            s_ase = S[np.ix_(a, se)]
            s_a = S[np.ix_(a, a)]
            gain = np.linalg.solve(s_se, s_ase.T).T
            cc = floor_covariance(s_a - gain @ s_ase.T)
            self.cov_se[g] = s_se
            self.gain[g] = gain
            self.cond_cov[g] = cc
            self.cond_chol[g] = np.linalg.cholesky(cc)
        with np.errstate(divide="ignore"):
            self.log_prior = np.log(model.weights)

    def log_weights(self, se_values):
        """(n, K) normalized log conditional component weights."""
        se_values = np.atleast_2d(se_values)
        lw = np.empty((se_values.shape[0], self.model.n_components))
        for g in range(self.model.n_components):
            lw[:, g] = self.log_prior[g] + gaussian_logpdf(se_values, self.mu_se[g], self.cov_se[g])
        norm = logsumexp(lw, axis=1)
        bad = ~np.isfinite(norm)
        if np.any(bad):
            log.warning("conditional weights vanished for %d SE values; using prior weights", int(bad.sum()))
            lw[bad] = self.log_prior
            norm[bad] = 0.0
        return lw - norm[:, None]

    def means(self, se_values):
        """(n, K, a_dim) conditional component means."""
        se_values = np.atleast_2d(se_values)
        diff = se_values[:, None, :] - self.mu_se[None]
        return self.mu_a[None] + np.einsum("kas,nks->nka", self.gain, diff)

    def condition(self, se_value):
        se_value = np.asarray(se_value, dtype=float).reshape(-1)
        if se_value.shape[0] != self.se_dim:
            raise ValueError(f"SE value has dimension {se_value.shape[0]}, expected {self.se_dim}")
        w = np.exp(self.log_weights(se_value[None])[0])
        w = w / w.sum()
        return GmmParams(w, self.means(se_value[None])[0], self.cond_cov.copy())

    def draw(self, se_values, u_comp, z):
        """Deterministic draw given uniforms ``u_comp`` (n,) and normals ``z`` (n, a_dim)."""
        w = np.exp(self.log_weights(se_values))
        cdf = np.cumsum(w, axis=1)
        cdf[:, -1] = np.inf
        comp = (np.asarray(u_comp)[:, None] < cdf).argmax(axis=1)
        mu = self.means(se_values)[np.arange(len(comp)), comp]
        return mu + np.einsum("nij,nj->ni", self.cond_chol[comp], z), comp


def condition(model, part, se_value):
    """Conditional mixture over the action block given the SE block value."""
    return Conditioner(model, part).condition(se_value)


def sample(model, n, seed=0):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.empty((0, model.dim))
    cdf = np.cumsum(model.weights)
    cdf[-1] = np.inf
    comp = np.searchsorted(cdf, rng.random(n), side="right")
    z = rng.standard_normal((n, model.dim))
    chol = np.linalg.cholesky(model.covariances)
    return model.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


__all__ = [
    "BlockPartition",
    "COV_FLOOR",
    "Conditioner",
    "GmmParams",
    "bic_score",
    "condition",
    "em_fit",
    "load_gmm",
    "log_density",
    "sample",
    "save_gmm",
    "select_components_by_bic",
]
