"""Scene-evolution prediction by Monte-Carlo rollout of per-situation action models.

Each situation owns a joint mixture over ``[state features | actions]``. A
rollout draws a situation once from the recognizer posterior, then alternates
conditional action draws and a deterministic kinematic update.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from ._stats import COV_FLOOR

log = logging.getLogger(__name__)

STATE_FEATURES = ("y1", "y2", "d1", "vy1", "vy2", "ay1", "ay2")
LEAD_FEATURES = ("y_lead", "vy_lead")
ACTION_LABELS = ("dx1", "dx2", "vy1_next", "vy2_next")
# internal kinematic layout used by batched rollouts
KIN_COLUMNS = ("x1", "y1", "vy1", "ay1", "x2", "y2", "vy2", "ay2", "y_lead", "vy_lead")
AGENTS = ("main", "merge")

DEFAULT_DT = 0.1
DEFAULT_HORIZON = 30


def state_feature_names(with_lead=False):
    return list(STATE_FEATURES + (LEAD_FEATURES if with_lead else ()))


@dataclass
class SceneState:
    y1: float
    y2: float
    x1: float
    x2: float
    vy1: float
    vy2: float
    ay1: float = 0.0
    ay2: float = 0.0
    y_lead: float | None = None
    vy_lead: float | None = None

    def __post_init__(self):
        vals = [self.y1, self.y2, self.x1, self.x2, self.vy1, self.vy2, self.ay1, self.ay2]
        if self.has_lead:
            vals += [self.y_lead, self.vy_lead]
        if not np.all(np.isfinite(vals)):
            raise ValueError("scene state contains non-finite values")

    @property
    def has_lead(self):
        return self.y_lead is not None

    @property
    def d1(self):
        return abs(self.x1 - self.x2)

    def se_vector(self):
        v = [self.y1, self.y2, self.d1, self.vy1, self.vy2, self.ay1, self.ay2]
        if self.has_lead:
            v += [self.y_lead, self.vy_lead]
        return np.array(v, dtype=float)

    def kinematics(self):
        lead = (self.y_lead, self.vy_lead) if self.has_lead else (0.0, 0.0)
        return np.array([self.x1, self.y1, self.vy1, self.ay1,
                         self.x2, self.y2, self.vy2, self.ay2, *lead], dtype=float)

    @classmethod
    def from_kinematics(cls, row, has_lead=False):
        x1, y1, vy1, ay1, x2, y2, vy2, ay2, yl, vyl = (float(v) for v in row)
        if has_lead:
            return cls(y1, y2, x1, x2, vy1, vy2, ay1, ay2, yl, vyl)
        return cls(y1, y2, x1, x2, vy1, vy2, ay1, ay2)


@dataclass
class SceneAction:
    dx1: float
    dx2: float
    vy1_next: float
    vy2_next: float

    def as_vector(self):
        return np.array([self.dx1, self.dx2, self.vy1_next, self.vy2_next], dtype=float)

    @classmethod
    def from_vector(cls, v):
        return cls(*(float(x) for x in v))


@dataclass
class SituationModel:
    """Joint state-action mixture for one situation, with its block partition."""

    label: str
    mixture: gmm.GmmParams
    partition: gmm.BlockPartition
    _conditioner: gmm.Conditioner | None = field(default=None, repr=False, compare=False)

    @property
    def conditioner(self):
        if self._conditioner is None:
            self._conditioner = gmm.Conditioner(self.mixture, self.partition)
        return self._conditioner

    @property
    def has_lead(self):
        return len(self.partition.se_indices) == len(STATE_FEATURES) + len(LEAD_FEATURES)


def fit_situation_model(label, states, actions, n_components=None, candidates=range(1, 11),
                        config=None, seed=0):
    """Fit the joint ``[SE | action]`` mixture for one situation.

    ``n_components=None`` picks the count by BIC over ``candidates``.
    """
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    joint = np.hstack([states, actions])
    if n_components is None:
        n_components, mix, _ = gmm.select_components_by_bic(joint, candidates, config, seed)
    else:
        mix, _ = gmm.em_fit(joint, n_components, config, seed=seed)
    se_dim = states.shape[1]
    mix.feature_names = state_feature_names(se_dim > len(STATE_FEATURES)) + list(ACTION_LABELS)
    part = gmm.BlockPartition(range(se_dim), range(se_dim, joint.shape[1]))
    return SituationModel(label, mix, part)


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _se_from_kin(K, has_lead):
    cols = [K[:, 1], K[:, 5], np.abs(K[:, 0] - K[:, 4]), K[:, 2], K[:, 6], K[:, 3], K[:, 7]]
    if has_lead:
        cols += [K[:, 8], K[:, 9]]
    return np.stack(cols, axis=1)


def _pick(probs, u):
    cdf = np.cumsum(probs)
    cdf[-1] = np.inf
    return int(np.searchsorted(cdf, u, side="right"))


def _check_posterior(models, posterior):
    p = np.asarray(posterior, dtype=float)
    if p.shape != (len(models),):
        raise ValueError(f"posterior has {p.size} entries for {len(models)} situation models")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("posterior must be a probability vector")
    return p


def sample_action(models, posterior, state, seed=0):
    """Draw a situation from ``posterior`` and one action from its conditional model.

    Random draws are consumed in a fixed order (situation uniform, component
    uniform, action normals) so that ``rollout`` reproduces it step for step.
    """
    p = _check_posterior(models, posterior)
    rng = _rng(seed)
    idx = _pick(p, rng.random())
    cond = models[idx].conditioner
    u = rng.random(1)
    z = rng.standard_normal((1, cond.a_dim))
    a, _ = cond.draw(state.se_vector()[None], u, z)
    return SceneAction.from_vector(a[0]), idx


def _propagate_batch(K, A, dt):
    out = K.copy()
    for xi, yi, vi, ai, da, va in ((0, 1, 2, 3, 0, 2), (4, 5, 6, 7, 1, 3)):
        v_old = K[:, vi]
        v_new = A[:, va]
        out[:, xi] = K[:, xi] + A[:, da]
        out[:, yi] = K[:, yi] + 0.5 * (v_old + v_new) * dt
        out[:, vi] = v_new
        out[:, ai] = (v_new - v_old) / dt
    out[:, 8] = K[:, 8] + K[:, 9] * dt
    return out


def propagate(state, action, dt=DEFAULT_DT):
    """Deterministic kinematic update: trapezoidal longitudinal step, additive lateral step."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    K = _propagate_batch(state.kinematics()[None], action.as_vector()[None], dt)
    return SceneState.from_kinematics(K[0], state.has_lead)


@dataclass
class TrajectoryEnsemble:
    """``states[i, k]`` is the kinematic row (``KIN_COLUMNS``) of sample i at step k."""

    states: np.ndarray
    situation_of_sample: np.ndarray
    dt: float
    truncated: np.ndarray = None
    has_lead: bool = False

    def __post_init__(self):
        if self.truncated is None:
            self.truncated = np.zeros(self.states.shape[0], dtype=bool)

    @property
    def n_samples(self):
        return self.states.shape[0]

    @property
    def horizon(self):
        return self.states.shape[1] - 1

    def positions(self, agent):
        """(n, horizon+1, 2) array of (x, y) for ``agent`` in ``AGENTS``."""
        i = AGENTS.index(agent)
        return self.states[:, :, [4 * i, 4 * i + 1]]

    def velocities(self, agent):
        return self.states[:, :, 4 * AGENTS.index(agent) + 2]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "step", "agent", "x", "y", "velocity"])
            for i in range(self.n_samples):
                for k in range(self.horizon + 1):
                    for agent in AGENTS:
                        j = 4 * AGENTS.index(agent)
                        row = self.states[i, k]
                        w.writerow([i, k, agent, repr(float(row[j])), repr(float(row[j + 1])),
                                    repr(float(row[j + 2]))])


def rollout(models, posterior, initial, horizon=DEFAULT_HORIZON, n_samples=1000, dt=DEFAULT_DT, seed=0):
    """Monte-Carlo ensemble of joint future trajectories.

    Sample ``i`` uses its own generator spawned from ``seed``, so results do
    not depend on batch order or on how many samples are drawn.
    """
    if horizon < 1 or n_samples < 1:
        raise ValueError("horizon and n_samples must be >= 1")
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = _check_posterior(models, posterior)
    has_lead = initial.has_lead
    a_dim = len(ACTION_LABELS)
    children = np.random.SeedSequence(seed).spawn(n_samples)
    sit = np.empty(n_samples, dtype=int)
    u_comp = np.empty((n_samples, horizon))
    z = np.empty((n_samples, horizon, a_dim))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        sit[i] = _pick(p, rng.random())
        u_comp[i] = rng.random(horizon)
        z[i] = rng.standard_normal((horizon, a_dim))

    states = np.full((n_samples, horizon + 1, len(KIN_COLUMNS)), np.nan)
    states[:, 0] = initial.kinematics()
    alive = np.ones(n_samples, dtype=bool)
    truncated = np.zeros(n_samples, dtype=bool)
    for k in range(horizon):
        for s, model in enumerate(models):
            rows = np.flatnonzero(alive & (sit == s))
            if rows.size == 0:
                continue
            K = states[rows, k]
            with np.errstate(all="ignore"):
                A, _ = model.conditioner.draw(_se_from_kin(K, has_lead), u_comp[rows, k], z[rows, k])
                states[rows, k + 1] = _propagate_batch(K, A, dt)
        bad = alive & ~np.all(np.isfinite(states[:, k + 1]), axis=1)
        if np.any(bad):
            log.warning("truncating %d samples at step %d: non-finite state", int(bad.sum()), k + 1)
            states[bad, k + 1:] = np.nan
            truncated |= bad
            alive &= ~bad
    return TrajectoryEnsemble(states, sit, dt, truncated, has_lead)


def step_statistics(ensemble, agent):
    """Per-step mean (H+1, 2) and covariance (H+1, 2, 2) of an agent's position."""
    P = ensemble.positions(agent)
    H1 = P.shape[1]
    means = np.empty((H1, 2))
    covs = np.empty((H1, 2, 2))
    for k in range(H1):
        pts = P[:, k]
        pts = pts[np.all(np.isfinite(pts), axis=1)]
        means[k] = pts.mean(axis=0)
        covs[k] = np.cov(pts.T) if len(pts) > 1 else np.zeros((2, 2))
    return means, covs


def ellipse_containment(ensemble, truth, agent, n_sigma=2.0):
    """Boolean per prediction step (1..H): truth position inside the n-sigma ellipse.

    ``truth`` is an (H+1, 2) array of (x, y) aligned with the ensemble steps.
    """
    means, covs = step_statistics(ensemble, agent)
    truth = np.asarray(truth, dtype=float)
    inside = np.empty(ensemble.horizon, dtype=bool)
    for k in range(1, ensemble.horizon + 1):
        c = covs[k] + COV_FLOOR * np.eye(2)
        d = truth[k] - means[k]
        inside[k - 1] = float(d @ np.linalg.solve(c, d)) <= n_sigma**2
    return inside


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell_x: float
    cell_y: float

    def __post_init__(self):
        if self.cell_x <= 0 or self.cell_y <= 0:
            raise ValueError("grid cells must have positive area")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValueError("grid extents must be non-empty")

    @property
    def shape(self):
        ny = int(math.ceil((self.y_max - self.y_min) / self.cell_y - 1e-12))
        nx = int(math.ceil((self.x_max - self.x_min) / self.cell_x - 1e-12))
        return ny, nx

    def x_edges(self):
        return self.x_min + self.cell_x * np.arange(self.shape[1] + 1)

    def y_edges(self):
        return self.y_min + self.cell_y * np.arange(self.shape[0] + 1)


@dataclass
class OccupancyGrid:
    spec: GridSpec
    counts: dict  # agent -> (ny, nx) array
    normalized: bool = False
    out_of_range: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)

    def to_csv(self, path):
        ny, nx = self.spec.shape
        with open(path, "w", newline="") as fh:
            s = self.spec
            fh.write(f"# x_min={s.x_min!r},x_max={s.x_max!r},y_min={s.y_min!r},y_max={s.y_max!r},"
                     f"cell_x={s.cell_x!r},cell_y={s.cell_y!r},nx={nx},ny={ny},"
                     f"normalized={int(self.normalized)}\n")
            w = csv.writer(fh)
            w.writerow(["agent", "row"] + [f"c{j}" for j in range(nx)])
            for agent, grid in self.counts.items():
                for r in range(ny):
                    w.writerow([agent, r] + [repr(float(v)) for v in grid[r]])


def occupancy_heatmap(ensemble, spec, normalize=True, agents=AGENTS):
    """Rasterize predicted positions (steps 1..H) into per-agent cell counts.

    Points outside the extents are clamped into the boundary cells and
    tallied in ``out_of_range``; non-finite points (truncated samples) are
    tallied in ``skipped``.
    """
    ny, nx = spec.shape
    counts, oor, skipped = {}, {}, {}
    for agent in agents:
        P = ensemble.positions(agent)[:, 1:].reshape(-1, 2)
        ok = np.all(np.isfinite(P), axis=1)
        skipped[agent] = int((~ok).sum())
        P = P[ok]
        ix = np.floor((P[:, 0] - spec.x_min) / spec.cell_x).astype(int)
        iy = np.floor((P[:, 1] - spec.y_min) / spec.cell_y).astype(int)
        outside = (ix < 0) | (ix >= nx) | (iy < 0) | (iy >= ny)
        oor[agent] = int(outside.sum())
        grid = np.zeros((ny, nx))
        np.add.at(grid, (np.clip(iy, 0, ny - 1), np.clip(ix, 0, nx - 1)), 1.0)
        if normalize and grid.sum() > 0:
            grid = grid / grid.sum()
        counts[agent] = grid
    return OccupancyGrid(spec, counts, normalize, oor, skipped)


def grid_around(ensemble, cell=0.5, margin=2.0):
    """A grid spec covering every finite predicted position of both agents."""
    pts = np.concatenate([ensemble.positions(a)[:, 1:].reshape(-1, 2) for a in AGENTS])
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    lo = np.floor((pts.min(axis=0) - margin) / cell) * cell
    hi = np.ceil((pts.max(axis=0) + margin) / cell) * cell
    return GridSpec(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]), cell, cell)
