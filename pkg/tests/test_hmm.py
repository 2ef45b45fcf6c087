import math

import numpy as np
import pytest

from merge_tlhmm import hmm
from merge_tlhmm._stats import COV_FLOOR, EmConfig
from oracles import hmm_brute_force_loglik, mvn_pdf


def two_state_model():
    return hmm.HmmParams([0.6, 0.4], [[0.7, 0.3], [0.4, 0.6]], [[0.0], [3.0]], np.ones((2, 1, 1)))


def test_one_state_two_zeros():
    m = hmm.HmmParams([1.0], [[1.0]], [[0.0]], [[[1.0]]])
    assert hmm.forward_log_likelihood(m, np.zeros((2, 1))) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_two_state_against_path_enumeration():
    seq = np.array([[0.1], [2.9], [3.1]])
    ll = hmm.forward_log_likelihood(two_state_model(), seq)
    # frozen from oracles.hmm_brute_force_loglik (8 hidden paths)
    assert ll == pytest.approx(-4.954837213978711, rel=1e-12)
    m = two_state_model()
    assert ll == pytest.approx(hmm_brute_force_loglik(m.initial, m.transition, m.means, m.covariances, seq), rel=1e-9)


def test_length_one_is_initial_mixture():
    m = two_state_model()
    x = 1.3
    expect = math.log(0.6 * mvn_pdf([x], [0.0], [[1.0]]) + 0.4 * mvn_pdf([x], [3.0], [[1.0]]))
    assert hmm.forward_log_likelihood(m, [[x]]) == pytest.approx(expect, rel=1e-12)


def test_long_sequence_does_not_underflow(rng):
    m = two_state_model()
    X = rng.normal(0.0, 1.0, (10_000, 1))
    ll = hmm.forward_log_likelihood(m, X)
    assert np.isfinite(ll) and ll < -10_000


def test_rejects_dimension_mismatch_and_nan():
    m = two_state_model()
    with pytest.raises(ValueError):
        hmm.forward_log_likelihood(m, np.zeros((3, 2)))
    with pytest.raises(ValueError):
        hmm.forward_log_likelihood(m, np.array([[0.0], [np.nan]]))


def test_window_log_likelihoods_match_slices(rng):
    m = two_state_model()
    X = rng.normal(1.5, 2.0, (12, 1))
    w = hmm.window_log_likelihoods(m, X, 4)
    assert w.shape == (9,)
    for i in range(9):
        assert w[i] == pytest.approx(hmm.forward_log_likelihood(m, X[i:i + 4]), rel=1e-12)


def test_params_validation():
    with pytest.raises(ValueError):
        hmm.HmmParams([0.5, 0.6], [[1, 0], [0, 1]], [[0], [1]], np.ones((2, 1, 1)))
    with pytest.raises(ValueError):
        hmm.HmmParams([0.5, 0.5], [[0.9, 0.2], [0, 1]], [[0], [1]], np.ones((2, 1, 1)))


def test_one_state_fit_is_closed_form(rng):
    X = rng.normal(3.0, 2.0, (200, 2))
    m, rep = hmm.baum_welch_fit([X], 1)
    assert np.allclose(m.means[0], X.mean(axis=0), atol=1e-9)
    assert np.allclose(m.covariances[0], np.cov(X.T, bias=True), atol=1e-9)
    assert m.transition.tolist() == [[1.0]]


def test_recovers_two_separated_states():
    rng = np.random.default_rng(0)
    A = np.array([[0.9, 0.1], [0.2, 0.8]])
    seqs = []
    for _ in range(50):
        s = rng.integers(2)
        xs = []
        for _ in range(100):
            xs.append(rng.normal(10.0 * s, 1.0))
            s = rng.choice(2, p=A[s])
        seqs.append(np.array(xs)[:, None])
    m, rep = hmm.baum_welch_fit(seqs, 2, seed=1)
    assert sorted(m.means[:, 0]) == pytest.approx([0.0, 10.0], abs=0.5)
    assert rep.converged
    assert np.all(np.diff(rep.log_likelihood_trace) >= -1e-8)


def test_max_iter_zero_returns_initialization(rng):
    X = rng.normal(size=(50, 1))
    init = hmm.initialize([X], 2, seed=4)
    m, rep = hmm.baum_welch_fit([X], 2, EmConfig(max_iter=0), seed=4)
    assert rep.iterations == 0 and len(rep.log_likelihood_trace) == 1
    assert m.equals(init)


def test_degenerate_data_is_floored():
    X = np.full((30, 2), 4.0)
    m, _ = hmm.baum_welch_fit([X], 1)
    assert np.linalg.eigvalsh(m.covariances[0]).min() >= COV_FLOOR * (1 - 1e-9)


def test_rejects_empty_and_mixed_dimensions():
    with pytest.raises(ValueError):
        hmm.baum_welch_fit([], 2)
    with pytest.raises(ValueError):
        hmm.baum_welch_fit([np.zeros((5, 1)), np.zeros((5, 2))], 1)


def test_finetune_keeps_state_count(rng):
    X = rng.normal(size=(80, 1))
    base, _ = hmm.baum_welch_fit([X], 3, seed=0)
    m, rep = hmm.baum_welch_fit([X + 0.2], init=base)
    assert m.n_states == 3 and rep.iterations >= 1


def test_select_state_count_examples(rng):
    tight = rng.normal(0.0, 0.1, (300, 1))
    assert hmm.select_state_count(tight, range(1, 4)) == 1
    two = np.concatenate([rng.normal(0, 1, (200, 1)), rng.normal(20, 1, (200, 1))])
    assert hmm.select_state_count(two, range(1, 5)) == 2
    assert hmm.select_state_count(two, [3]) == 3


def test_save_load_round_trip(tmp_path):
    m = two_state_model()
    hmm.save_hmm(tmp_path / "m.json", m)
    assert hmm.load_hmm(tmp_path / "m.json").equals(m)


def test_state_occupancy_sums_to_one(rng):
    X = rng.normal(size=(60, 1))
    occ = hmm.state_occupancy(two_state_model(), [X, X[:10]])
    assert occ.sum() == pytest.approx(1.0) and np.all(occ >= 0)
