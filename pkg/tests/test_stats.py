import numpy as np
import pytest

from merge_tlhmm._stats import EmConfig, floor_covariance, gaussian_logpdf, logsumexp
from oracles import mvn_pdf


def test_floor_leaves_well_conditioned_matrix():
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    assert np.array_equal(floor_covariance(S), S)


def test_floor_raises_small_eigenvalues():
    S = np.array([[1.0, 1.0], [1.0, 1.0]])
    F = floor_covariance(S, 1e-3)
    w = np.linalg.eigvalsh(F)
    assert w.min() >= 1e-3 * (1 - 1e-9)
    assert w.max() == pytest.approx(2.0)


def test_gaussian_logpdf_matches_direct_formula():
    cov = np.array([[1.5, 0.2], [0.2, 0.7]])
    x = np.array([[0.3, -1.0], [2.0, 0.5]])
    got = gaussian_logpdf(x, np.array([0.1, 0.0]), cov)
    want = [np.log(mvn_pdf(r, [0.1, 0.0], cov)) for r in x]
    assert got == pytest.approx(want, rel=1e-12)


def test_logsumexp_handles_all_minus_inf():
    assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf
    assert logsumexp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0 + np.log(2))


def test_em_config_validation():
    with pytest.raises(ValueError):
        EmConfig(tol=-1)
    with pytest.raises(ValueError):
        EmConfig(cov_floor=0)
