"""Synthetic ramp-merging events, noise injection, Kalman smoothing, feature extraction, CSV I/O.

Coordinates: ``y`` runs along the main lane, ``x`` is lateral. The main lane
is centred on ``x = 0`` and the on-ramp lane on ``x = -lane_width``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import yaml

from .hmm import ObservationSequence
from .scene import ACTION_LABELS, state_feature_names

log = logging.getLogger(__name__)

SITUATIONS = ("main_yields", "merge_yields")
STAGES = ("ambiguity", "preparation", "merging", "car_following")
AGENT_ROLES = ("main", "merge", "lead")


@dataclass
class AgentTrack:
    x: np.ndarray
    y: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.vy = np.asarray(self.vy, dtype=float)
        if not (self.x.shape == self.y.shape == self.vy.shape) or self.x.ndim != 1:
            raise ValueError("agent series must be 1-D and of equal length")

    def __len__(self):
        return self.x.shape[0]

    def copy(self):
        return AgentTrack(self.x.copy(), self.y.copy(), self.vy.copy())


@dataclass
class Event:
    id: str
    dt: float
    agents: dict
    situation: str
    stage_boundaries: tuple | None = None

    def __post_init__(self):
        if "main" not in self.agents or "merge" not in self.agents:
            missing = [a for a in ("main", "merge") if a not in self.agents]
            raise ValueError(f"event {self.id}: missing agent(s) {missing}")
        lengths = {len(t) for t in self.agents.values()}
        if len(lengths) != 1:
            raise ValueError(f"event {self.id}: agent series have different lengths {sorted(lengths)}")
        if self.stage_boundaries is not None:
            b = tuple(int(v) for v in self.stage_boundaries)
            if len(b) != 3 or not (0 < b[0] < b[1] < b[2] < len(self)):
                raise ValueError(f"event {self.id}: stage boundaries {b} are not strictly increasing interior indices")
            self.stage_boundaries = b

    def __len__(self):
        return len(self.agents["main"])

    @property
    def has_lead(self):
        return "lead" in self.agents

    @property
    def trainable(self):
        return self.stage_boundaries is not None

    def stage_slices(self):
        b = (0,) + tuple(self.stage_boundaries) + (len(self),)
        return {stage: slice(b[i], b[i + 1]) for i, stage in enumerate(STAGES)}

    def outcome_consistent(self):
        ahead = self.agents["merge"].y[-1] > self.agents["main"].y[-1]
        return ahead == (self.situation == "main_yields")

    def copy(self):
        return replace(self, agents={k: v.copy() for k, v in self.agents.items()})


@dataclass
class GeneratorParams:
    """Magnitudes for the four-stage merging generator (SI units)."""

    dt: float = 0.1
    speed_range: tuple = (20.0, 26.0)
    speed_diff_range: tuple = (-1.0, 1.0)
    initial_gap_range: tuple = (-5.0, 5.0)
    start_position_range: tuple = (0.0, 40.0)
    ambiguity_duration: tuple = (2.0, 3.0)
    preparation_duration: tuple = (2.0, 3.0)
    merging_duration: tuple = (2.0, 3.0)
    following_duration: tuple = (2.0, 3.0)
    yield_decel_range: tuple = (1.0, 2.5)
    assert_accel_range: tuple = (0.0, 1.0)
    max_decel: float = 5.0
    min_merge_gap: float = 8.0
    lane_width: float = 3.5
    accel_noise: float = 0.3
    accel_noise_corr: float = 0.9
    lateral_noise: float = 0.05
    follow_time_gap: float = 1.0
    follow_standstill: float = 4.0
    follow_gain_gap: float = 0.2
    follow_gain_speed: float = 0.6
    min_speed: float = 2.0
    leading_vehicle: bool = False
    lead_gap_range: tuple = (35.0, 50.0)

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (tuple, list)):
                if len(v) != 2 or v[0] > v[1]:
                    raise ValueError(f"{f.name}: range {v} is empty")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.min_merge_gap <= 0:
            raise ValueError("min_merge_gap must be positive: a zero gap makes the merge infeasible")
        if self.speed_range[0] <= self.min_speed:
            raise ValueError("speed_range must exceed min_speed")
        for name in ("ambiguity_duration", "preparation_duration", "merging_duration", "following_duration"):
            if getattr(self, name)[0] < 2 * self.dt:
                raise ValueError(f"{name} must span at least two steps")
        if self.yield_decel_range[0] < 0 or self.assert_accel_range[0] < 0:
            raise ValueError("acceleration magnitudes must be non-negative")
        if self.yield_decel_range[1] > self.max_decel:
            raise ValueError("yield_decel_range exceeds max_decel")
        if self.lane_width <= 0:
            raise ValueError("lane_width must be positive")
        if self.leading_vehicle and self.lead_gap_range[0] <= self.min_merge_gap:
            raise ValueError("lead_gap_range leaves no room for the merging car")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown generator parameters: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}).validate()


def load_generator_params(path):
    with open(path) as fh:
        return GeneratorParams.from_dict(yaml.safe_load(fh) or {})


def save_generator_params(path, params):
    with open(path, "w") as fh:
        yaml.safe_dump(params.to_dict(), fh, sort_keys=False)


def _ar1(rng, n, sigma, rho):
    out = np.empty(n)
    e = rng.normal(0.0, sigma)
    s = math.sqrt(1.0 - rho * rho)
    for i in range(n):
        out[i] = e
        e = rho * e + s * rng.normal(0.0, sigma)
    return out


def _steps(rng, rng_range, dt):
    return max(2, int(round(rng.uniform(*rng_range) / dt)))


def generate_event(situation, params=None, seed=0, event_id=None):
    """Simulate one merging interaction whose outcome is ``situation``.

    Stages: constant speeds (ambiguity); the yielding car brakes while the
    other holds or accelerates (preparation); the ramp car crosses into the
    main lane (merging); the yielding car follows with a gap law.
    """
    if situation not in SITUATIONS:
        raise ValueError(f"unknown situation {situation!r}; expected one of {SITUATIONS}")
    params = (params or GeneratorParams()).validate()
    rng = np.random.default_rng(seed)
    dt = params.dt
    n_a = _steps(rng, params.ambiguity_duration, dt)
    n_p = _steps(rng, params.preparation_duration, dt)
    n_m = _steps(rng, params.merging_duration, dt)
    n_f = _steps(rng, params.following_duration, dt)
    T = n_a + n_p + n_m + n_f
    b1, b2, b3 = n_a, n_a + n_p, n_a + n_p + n_m

    v1 = rng.uniform(*params.speed_range)
    v2 = v1 + rng.uniform(*params.speed_diff_range)
    y1 = rng.uniform(*params.start_position_range)
    y2 = y1 + rng.uniform(*params.initial_gap_range)
    # index 0: main car, 1: merging car
    yielder = 0 if situation == "main_yields" else 1
    leader = 1 - yielder
    decel = rng.uniform(*params.yield_decel_range)
    accel = rng.uniform(*params.assert_accel_range)

    # longitudinal gap the leader must build by the end of merging, predicted
    # from the state at the start of preparation under nominal accelerations
    P, M = n_p * dt, n_m * dt
    y0 = np.array([y1, y2])
    v0 = np.array([v1, v2])
    y_pre = y0 + v0 * n_a * dt
    s0 = y_pre[leader] - y_pre[yielder]
    dv0 = v0[leader] - v0[yielder]
    needed = 2.0 * params.min_merge_gap  # margin for the behaviour noise
    a_rel_req = (needed - s0 - dv0 * (P + M)) / (0.5 * P * P + P * M)
    if a_rel_req > accel + decel:
        decel = a_rel_req - accel
    if decel > params.max_decel:
        raise ValueError(f"merge infeasible: required deceleration {decel:.2f} exceeds max_decel")
    if v0[yielder] - decel * P < params.min_speed:
        decel = max(0.0, (v0[yielder] - params.min_speed) / P)
        if accel + decel < a_rel_req:
            accel = a_rel_req - decel

    noise = np.stack([_ar1(rng, T, params.accel_noise, params.accel_noise_corr) for _ in range(2)])
    lat = np.stack([_ar1(rng, T, params.lateral_noise, params.accel_noise_corr) for _ in range(3)])

    y = np.empty((2, T))
    v = np.empty((2, T))
    y[:, 0] = y0
    v[:, 0] = v0
    for t in range(T - 1):
        a = np.zeros(2)
        if b1 <= t < b2:
            a[yielder] = -decel
            a[leader] = accel
        elif t >= b3:
            gap = y[leader, t] - y[yielder, t]
            desired = params.follow_standstill + params.follow_time_gap * v[yielder, t]
            a[yielder] = np.clip(params.follow_gain_gap * (gap - desired)
                                 + params.follow_gain_speed * (v[leader, t] - v[yielder, t]), -params.max_decel, 2.0)
        a = a + noise[:, t]
        v[:, t + 1] = np.maximum(v[:, t] + a * dt, params.min_speed)
        y[:, t + 1] = y[:, t] + 0.5 * (v[:, t] + v[:, t + 1]) * dt

    x = np.zeros((2, T))
    phase = np.clip((np.arange(T) - b2) / float(n_m), 0.0, 1.0)
    x[1] = -params.lane_width * 0.5 * (1.0 + np.cos(np.pi * phase))
    x = x + lat[:2]

    agents = {
        "main": AgentTrack(x[0], y[0], v[0]),
        "merge": AgentTrack(x[1], y[1], v[1]),
    }
    if params.leading_vehicle:
        gap = rng.uniform(*params.lead_gap_range)
        vl = max(v1, v2) + rng.uniform(0.0, 1.0)
        yl = max(y1, y2) + gap + vl * dt * np.arange(T)
        agents["lead"] = AgentTrack(lat[2], yl, np.full(T, vl))
    ev = Event(event_id or f"{situation}-{seed}", dt, agents, situation, (b1, b2, b3))
    if not ev.outcome_consistent():
        raise RuntimeError(f"generator produced an inconsistent outcome for seed {seed}")
    return ev


def generate_dataset(n_events, params=None, seed=0):
    """Balanced dataset: even indices ``main_yields``, odd ``merge_yields``.

    Event ``i`` uses seed ``seed + i`` and id ``ev{i:04d}``.
    """
    return [
        generate_event(SITUATIONS[i % 2], params, seed=seed + i, event_id=f"ev{i:04d}")
        for i in range(n_events)
    ]


def add_noise(event, sigma_pos, sigma_vel, seed=0):
    """I.i.d. Gaussian perturbation of every position and velocity sample."""
    if sigma_pos < 0 or sigma_vel < 0:
        raise ValueError("noise scales must be non-negative")
    rng = np.random.default_rng(seed)
    out = event.copy()
    for name in sorted(out.agents):
        tr = out.agents[name]
        n = len(tr)
        tr.x = tr.x + sigma_pos * rng.standard_normal(n)
        tr.y = tr.y + sigma_pos * rng.standard_normal(n)
        tr.vy = tr.vy + sigma_vel * rng.standard_normal(n)
    return out


@dataclass
class EkfConfig:
    accel_psd: float = 0.5  # white-acceleration spectral density, m^2/s^3
    sigma_pos: float = 0.5
    sigma_vel: float = 0.5


def ekf_smooth(pos, dt, vel=None, config=None, backward=True):
    """Constant-velocity Kalman filter plus Rauch-Tung-Striebel smoothing on one axis.

    The motion model is linear, so the extended filter reduces to the plain
    Kalman recursion. ``backward=False`` skips the smoothing pass and returns
    the causal filter estimates. Returns ``(position, velocity)`` arrays of
    the input length.
    """
    config = config or EkfConfig()
    z = np.asarray(pos, dtype=float)
    T = z.shape[0]
    if T < 2:
        raise ValueError("smoothing needs at least two samples")
    if not np.all(np.isfinite(z)) or (vel is not None and not np.all(np.isfinite(vel))):
        raise ValueError("smoothing input contains non-finite values")
    F = np.array([[1.0, dt], [0.0, 1.0]])
    q = config.accel_psd
    Q = q * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
    if vel is None:
        H = np.array([[1.0, 0.0]])
        R = np.array([[config.sigma_pos**2]])
        meas = z[:, None]
        x = np.array([z[0], (z[1] - z[0]) / dt])
        P = np.diag([config.sigma_pos**2, 2 * config.sigma_pos**2 / dt**2])
    else:
        vel = np.asarray(vel, dtype=float)
        H = np.eye(2)
        R = np.diag([config.sigma_pos**2, config.sigma_vel**2])
        meas = np.stack([z, vel], axis=1)
        x = np.array([z[0], vel[0]])
        P = R.copy()

    xs_f = np.empty((T, 2))
    Ps_f = np.empty((T, 2, 2))
    xs_p = np.empty((T, 2))
    Ps_p = np.empty((T, 2, 2))
    for t in range(T):
        if t > 0:
            x = F @ x
            P = F @ P @ F.T + Q
        xs_p[t], Ps_p[t] = x, P
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        x = x + K @ (meas[t] - H @ x)
        P = (np.eye(2) - K @ H) @ P
        xs_f[t], Ps_f[t] = x, P

    xs = xs_f.copy()
    if not backward:
        return xs[:, 0], xs[:, 1]
    for t in range(T - 2, -1, -1):
        C = Ps_f[t] @ F.T @ np.linalg.inv(Ps_p[t + 1])
        xs[t] = xs_f[t] + C @ (xs[t + 1] - xs_p[t + 1])
    return xs[:, 0], xs[:, 1]


def smooth_event(event, config=None, backward=True):
    """Smooth every agent's lateral and longitudinal tracks.

    Use ``backward=False`` for data that is scored online: the smoothing pass
    lets later measurements leak into earlier estimates.
    """
    out = event.copy()
    for tr in out.agents.values():
        tr.x, _ = ekf_smooth(tr.x, event.dt, None, config, backward)
        tr.y, tr.vy = ekf_smooth(tr.y, event.dt, tr.vy, config, backward)
    return out


@dataclass
class EventFeatures:
    """Raw recognition features plus paired state/action rows for the scene model."""

    observations: ObservationSequence  # one row per step, ``feature_names`` columns
    states: np.ndarray  # (T-1, n_state) rows paired with ``actions``
    actions: np.ndarray  # (T-1, 4)
    feature_names: list = field(default_factory=list)
    action_names: list = field(default_factory=lambda: list(ACTION_LABELS))


def central_acceleration(v, dt):
    return np.gradient(v, dt) if len(v) > 1 else np.zeros_like(v)


def extract_features(event, use_lead=None):
    """Per-step state features and per-transition action labels for one event.

    Accelerations are central differences of the velocity series.
    """
    for name in ("main", "merge"):
        if name not in event.agents:
            raise ValueError(f"event {event.id}: missing agent {name!r}")
    use_lead = event.has_lead if use_lead is None else use_lead
    if use_lead and not event.has_lead:
        raise ValueError(f"event {event.id}: missing agent 'lead'")
    m, g = event.agents["main"], event.agents["merge"]
    dt = event.dt
    cols = [m.y, g.y, np.abs(m.x - g.x), m.vy, g.vy,
            central_acceleration(m.vy, dt), central_acceleration(g.vy, dt)]
    if use_lead:
        lead = event.agents["lead"]
        cols += [lead.y, lead.vy]
    S = np.stack(cols, axis=1)
    A = np.stack([np.diff(m.x), np.diff(g.x), m.vy[1:], g.vy[1:]], axis=1)
    return EventFeatures(ObservationSequence(S, dt), S[:-1].copy(), A, state_feature_names(use_lead))


def initial_scene_state(event, step):
    """SceneState at ``step`` with accelerations consistent with ``extract_features``."""
    from .scene import SceneState

    m, g = event.agents["main"], event.agents["merge"]
    a1 = central_acceleration(m.vy, event.dt)[step]
    a2 = central_acceleration(g.vy, event.dt)[step]
    kw = {}
    if event.has_lead:
        kw = dict(y_lead=float(event.agents["lead"].y[step]), vy_lead=float(event.agents["lead"].vy[step]))
    return SceneState(float(m.y[step]), float(g.y[step]), float(m.x[step]), float(g.x[step]),
                      float(m.vy[step]), float(g.vy[step]), float(a1), float(a2), **kw)


EVENT_CSV_COLUMNS = ("event_id", "situation", "stage_boundaries", "dt", "agent", "frame", "x", "y", "vy")


def write_events_csv(path, events):
    """One row per agent per frame; event-level fields repeat on every row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVENT_CSV_COLUMNS)
        for ev in events:
            b = "" if ev.stage_boundaries is None else ";".join(str(i) for i in ev.stage_boundaries)
            for name in AGENT_ROLES:
                if name not in ev.agents:
                    continue
                tr = ev.agents[name]
                for k in range(len(tr)):
                    w.writerow([ev.id, ev.situation, b, repr(float(ev.dt)), name, k,
                                repr(float(tr.x[k])), repr(float(tr.y[k])), repr(float(tr.vy[k]))])


def load_events_csv(path, mapping=None, dt=None):
    """Group CSV rows into events.

    ``mapping`` renames canonical columns (``event_id``, ``agent``, ``frame``,
    ``x``, ``y`` required; ``vy``, ``situation``, ``stage_boundaries``, ``dt``
    optional) to the file's headers. Malformed events are skipped and
    reported. Returns ``(events, diagnostics)`` where each diagnostic is a
    ``(event_id, message)`` pair.
    """
    mapping = dict(mapping or {})
    col = {c: mapping.get(c, c) for c in EVENT_CSV_COLUMNS}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("event_id", "agent", "frame", "x", "y"):
            if col[required] not in header:
                raise ValueError(f"{path}: column {col[required]!r} (for {required}) not found in header {header}")
        unknown = [c for c in mapping.values() if c not in header]
        if unknown:
            raise ValueError(f"{path}: mapped columns not in header: {unknown}")
        groups = {}
        for row in reader:
            groups.setdefault(row[col["event_id"]], []).append(row)

    events, diagnostics = [], []
    for eid, rows in groups.items():
        try:
            events.append(_event_from_rows(eid, rows, col, header, dt))
        except (ValueError, KeyError) as exc:
            log.error("event_id=%s rejected: %s", eid, exc)
            diagnostics.append((eid, str(exc)))
    return events, diagnostics


def _event_from_rows(eid, rows, col, header, dt):
    def opt(name):
        return col[name] in header and rows[0][col[name]] not in ("", None)

    if dt is None:
        if not opt("dt"):
            raise ValueError("no dt column and no dt given")
        dt = float(rows[0][col["dt"]])
    situation = rows[0][col["situation"]] if opt("situation") else ""
    bounds = None
    if opt("stage_boundaries"):
        bounds = tuple(int(v) for v in rows[0][col["stage_boundaries"]].split(";"))
    has_vy = col["vy"] in header

    per_agent = {}
    for r in rows:
        per_agent.setdefault(r[col["agent"]], []).append(r)
    agents = {}
    frames_ref = None
    for name, rs in per_agent.items():
        frames = np.array([float(r[col["frame"]]) for r in rs])
        if np.any(np.diff(frames) <= 0):
            raise ValueError(f"agent {name}: frames are not strictly increasing")
        if frames_ref is None:
            frames_ref = frames
        elif frames.shape != frames_ref.shape or np.any(frames != frames_ref):
            raise ValueError(f"agent {name}: ragged series (frames differ from other agents)")
        x = np.array([float(r[col["x"]]) for r in rs])
        y = np.array([float(r[col["y"]]) for r in rs])
        if has_vy and all(r[col["vy"]] not in ("", None) for r in rs):
            vy = np.array([float(r[col["vy"]]) for r in rs])
        else:
            if len(y) < 2:
                raise ValueError(f"agent {name}: cannot differentiate a single sample")
            vy = np.gradient(y, frames * dt)
        agents[name] = AgentTrack(x, y, vy)
    return Event(eid, dt, agents, situation, bounds)
