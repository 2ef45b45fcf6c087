import math

import numpy as np
import pytest

from merge_tlhmm import gmm, scene
from merge_tlhmm._stats import COV_FLOOR
from oracles import gaussian_conditional


def state(**kw):
    base = dict(y1=0.0, y2=-3.0, x1=0.0, x2=-3.5, vy1=20.0, vy2=21.0, ay1=0.0, ay2=0.0)
    base.update(kw)
    return scene.SceneState(**base)


def fixed_action_model(label, action, var=COV_FLOOR):
    """Actions independent of the state, with (near) zero spread."""
    dim = len(scene.STATE_FEATURES) + 4
    mean = np.concatenate([np.zeros(len(scene.STATE_FEATURES)), action])
    cov = np.eye(dim)
    cov[7:, 7:] = np.eye(4) * var
    mix = gmm.GmmParams([1.0], mean[None], cov[None])
    return scene.SituationModel(label, mix, gmm.BlockPartition(range(7), range(7, 11)))


def correlated_model(rng, label="s"):
    A = rng.normal(size=(11, 11))
    cov = A @ A.T / 11 + 0.1 * np.eye(11)
    mean = rng.normal(size=11)
    return scene.SituationModel(label, gmm.GmmParams([1.0], mean[None], cov[None]),
                                gmm.BlockPartition(range(7), range(7, 11)))


def test_propagate_example():
    s = state()
    out = scene.propagate(s, scene.SceneAction(0.1, 0.2, 22.0, 19.0), dt=0.1)
    assert out.x1 == pytest.approx(0.1) and out.x2 == pytest.approx(-3.3)
    assert out.y1 == pytest.approx(2.1) and out.y2 == pytest.approx(-3.0 + 2.0)
    assert out.vy1 == 22.0 and out.ay1 == pytest.approx(20.0) and out.ay2 == pytest.approx(-20.0)
    with pytest.raises(ValueError):
        scene.propagate(s, scene.SceneAction(0, 0, 20, 21), dt=0.0)


def test_propagate_is_invertible():
    s = state(vy1=17.3, vy2=24.1)
    a = scene.SceneAction(-0.3, 0.05, 18.0, 23.5)
    n = scene.propagate(s, a, 0.1)
    # recover the action from the two states
    assert n.x1 - s.x1 == pytest.approx(a.dx1) and n.x2 - s.x2 == pytest.approx(a.dx2)
    assert 2 * (n.y1 - s.y1) / 0.1 - s.vy1 == pytest.approx(a.vy1_next)
    assert 2 * (n.y2 - s.y2) / 0.1 - s.vy2 == pytest.approx(a.vy2_next)


def test_propagate_moves_lead_at_constant_speed():
    s = state(y_lead=40.0, vy_lead=25.0)
    n = scene.propagate(s, scene.SceneAction(0, 0, 20, 21), 0.1)
    assert n.y_lead == pytest.approx(42.5) and n.vy_lead == 25.0


def test_scene_state_rejects_nan():
    with pytest.raises(ValueError):
        state(vy1=float("nan"))


def test_sample_action_delta_model():
    m = fixed_action_model("a", [0.1, -0.2, 20.0, 21.0])
    a, idx = scene.sample_action([m], [1.0], state(), seed=1)
    assert idx == 0
    assert a.as_vector() == pytest.approx([0.1, -0.2, 20.0, 21.0], abs=0.01)


def test_sample_action_follows_posterior_and_conditional(rng):
    m0 = correlated_model(rng, "a")
    m1 = fixed_action_model("b", [5.0, 5.0, 5.0, 5.0])
    s = state(y1=0.3, y2=-0.2, x1=0.1, x2=-0.4, vy1=0.5, vy2=-0.5, ay1=0.2, ay2=0.1)
    draws = [scene.sample_action([m0, m1], [0.3, 0.7], s, seed=i) for i in range(4000)]
    picks = np.array([i for _, i in draws])
    assert abs(np.mean(picks == 0) - 0.3) < 0.03
    A = np.array([a.as_vector() for a, i in draws if i == 0])
    mu, cov = gaussian_conditional(m0.mixture.means[0], m0.mixture.covariances[0], range(7), range(7, 11),
                                   s.se_vector())
    se = np.sqrt(np.diag(cov) / len(A))
    assert np.all(np.abs(A.mean(axis=0) - mu) < 5 * se)
    assert np.allclose(A.std(axis=0), np.sqrt(np.diag(cov)), rtol=0.1)


def test_sample_action_rejects_bad_posterior():
    m = fixed_action_model("a", [0, 0, 20, 21])
    with pytest.raises(ValueError):
        scene.sample_action([m, m], [0.6, 0.6], state())
    with pytest.raises(ValueError):
        scene.sample_action([m], [0.5, 0.5], state())


def test_rollout_horizon_one_matches_sample_action(rng):
    models = [correlated_model(rng, "a"), correlated_model(rng, "b")]
    s = state(vy1=0.3, vy2=-0.1)
    ens = scene.rollout(models, [0.4, 0.6], s, horizon=1, n_samples=5, seed=11)
    assert ens.states.shape == (5, 2, len(scene.KIN_COLUMNS))
    children = np.random.SeedSequence(11).spawn(5)
    for i, child in enumerate(children):
        a, idx = scene.sample_action(models, [0.4, 0.6], s, seed=np.random.default_rng(child))
        assert idx == ens.situation_of_sample[i]
        want = scene.propagate(s, a).kinematics()
        assert np.allclose(ens.states[i, 1], want, atol=1e-12)


def test_rollout_delta_model_is_deterministic_motion():
    m = fixed_action_model("a", [0.0, 0.35, 20.0, 21.0])
    s = state()
    ens = scene.rollout([m], [1.0], s, horizon=10, n_samples=20, seed=0)
    x2 = ens.positions("merge")[:, :, 0]
    assert np.allclose(x2[:, -1], -3.5 + 10 * 0.35, atol=0.05)
    y1 = ens.positions("main")[:, :, 1]
    assert np.allclose(y1[:, -1], 20.0, atol=0.05)
    assert not ens.truncated.any()


def test_rollout_is_seeded_and_batch_independent(rng):
    models = [correlated_model(rng, "a"), correlated_model(rng, "b")]
    s = state(vy1=0.3, vy2=-0.1)
    a = scene.rollout(models, [0.5, 0.5], s, horizon=6, n_samples=40, seed=3)
    b = scene.rollout(models, [0.5, 0.5], s, horizon=6, n_samples=40, seed=3)
    c = scene.rollout(models, [0.5, 0.5], s, horizon=6, n_samples=15, seed=3)
    assert np.array_equal(a.states, b.states, equal_nan=True)
    assert np.array_equal(a.states[:15], c.states, equal_nan=True)


def test_rollout_validates_arguments():
    m = fixed_action_model("a", [0, 0, 20, 21])
    with pytest.raises(ValueError):
        scene.rollout([m], [1.0], state(), horizon=0)
    with pytest.raises(ValueError):
        scene.rollout([m], [1.0], state(), n_samples=0)


def test_ensemble_csv_has_row_per_sample_step_agent(tmp_path):
    m = fixed_action_model("a", [0, 0, 20, 21])
    ens = scene.rollout([m], [1.0], state(), horizon=3, n_samples=4)
    ens.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "sample_id,step,agent,x,y,velocity" and len(lines) == 1 + 4 * 4 * 2


def _ensemble_from_points(main, merge=None):
    """Ensemble whose step-1 positions are the given (n, 2) points."""
    n = main.shape[0]
    merge = main if merge is None else merge
    S = np.zeros((n, 2, len(scene.KIN_COLUMNS)))
    S[:, 1, [0, 1]] = main
    S[:, 1, [4, 5]] = merge
    return scene.TrajectoryEnsemble(S, np.zeros(n, dtype=int), 0.1)


def test_heatmap_counts_and_normalization(rng):
    m = fixed_action_model("a", [0.1, 0.1, 20, 21], var=0.01)
    ens = scene.rollout([m], [1.0], state(), horizon=5, n_samples=30, seed=2)
    spec = scene.grid_around(ens, cell=0.5)
    raw = scene.occupancy_heatmap(ens, spec, normalize=False)
    for agent in scene.AGENTS:
        assert raw.counts[agent].sum() == 30 * 5 and raw.out_of_range[agent] == 0
    norm = scene.occupancy_heatmap(ens, spec)
    assert all(norm.counts[a].sum() == pytest.approx(1.0) for a in scene.AGENTS)


def test_heatmap_five_deposits():
    pts = np.array([[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.3, 0.3], [5.0, 5.0]])
    spec = scene.GridSpec(0.0, 1.0, 0.0, 1.0, 0.5, 0.5)
    g = scene.occupancy_heatmap(_ensemble_from_points(pts), spec, normalize=False)
    assert g.counts["main"].tolist() == [[2.0, 1.0], [1.0, 1.0]]
    assert g.out_of_range["main"] == 1


def test_heatmap_matches_gaussian_cell_mass():
    rng = np.random.default_rng(5)
    n = 200_000
    pts = rng.normal([1.0, -0.5], [0.8, 1.2], (n, 2))
    spec = scene.GridSpec(-3.0, 5.0, -5.5, 4.5, 1.0, 1.0)
    g = scene.occupancy_heatmap(_ensemble_from_points(pts), spec).counts["main"]

    def cdf(v, mu, sd):
        return 0.5 * (1 + math.erf((v - mu) / (sd * math.sqrt(2))))

    xe, ye = spec.x_edges(), spec.y_edges()
    worst = 0.0
    for r in range(1, g.shape[0] - 1):
        for c in range(1, g.shape[1] - 1):
            p = (cdf(xe[c + 1], 1.0, 0.8) - cdf(xe[c], 1.0, 0.8)) * (cdf(ye[r + 1], -0.5, 1.2) - cdf(ye[r], -0.5, 1.2))
            worst = max(worst, abs(g[r, c] - p) / math.sqrt(p * (1 - p) / n + 1e-12))
    assert worst < 5.0


def test_grid_rejects_zero_area():
    with pytest.raises(ValueError):
        scene.GridSpec(0, 1, 0, 1, 0.0, 0.5)
    with pytest.raises(ValueError):
        scene.GridSpec(0, 0, 0, 1, 0.5, 0.5)


def test_ellipse_containment_of_mean_and_far_point():
    rng = np.random.default_rng(0)
    pts = rng.normal(0, 1, (2000, 2))
    ens = _ensemble_from_points(pts)
    assert scene.ellipse_containment(ens, [[0, 0], [0.0, 0.0]], "main").tolist() == [True]
    assert scene.ellipse_containment(ens, [[0, 0], [3.0, 0.0]], "main").tolist() == [False]


def test_situation_model_fit_by_bic(rng):
    S = rng.normal(size=(300, 7))
    A = S[:, :4] * 0.5 + rng.normal(0, 0.1, (300, 4))
    m = scene.fit_situation_model("a", S, A, candidates=range(1, 3))
    assert m.mixture.dim == 11 and not m.has_lead
    assert m.mixture.feature_names[-4:] == list(scene.ACTION_LABELS)
    mu = m.conditioner.means(S[:1])
    assert np.allclose(mu[0], S[0, :4] * 0.5, atol=0.1)
