"""The compiled kernels must agree with the numpy fallback."""
import numpy as np
import pytest

from ltood import _backend

pytestmark = pytest.mark.skipif("cython" not in _backend.available(), reason="extension not built")


@pytest.fixture
def pair():
    return _backend.get("python"), _backend.get("cython")


def _batch(rng, B=9, M=6, E=5):
    return (rng.normal(size=(B, E)), rng.normal(size=(M, E)), rng.integers(0, M, B),
            rng.integers(0, M, B), rng.random(B), rng.random(B))


def test_xent_rows_match(pair, rng):
    py, cy = pair
    z = rng.normal(size=(9, 6)) * 5
    _, _, yi, yj, lam, w = _batch(rng)
    for a, b in zip(py.xent_rows(z, yi, yj, lam, w), cy.xent_rows(z, yi, yj, lam, w)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("gamma,w_mse", [(1.0, 0.01), (0.3, 0.5), (2.0, 0.0)])
def test_proto_rows_match(pair, rng, gamma, w_mse):
    py, cy = pair
    emb, P, yi, yj, lam, w = _batch(rng)
    for a, b in zip(py.proto_rows(emb, P, yi, yj, lam, w, gamma, w_mse),
                    cy.proto_rows(emb, P, yi, yj, lam, w, gamma, w_mse)):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-13)


def test_sqdist_match(pair, rng):
    py, cy = pair
    emb, P, *_ = _batch(rng)
    np.testing.assert_allclose(py.sqdist(emb, P), cy.sqdist(emb, P), rtol=1e-13)


def test_adam_update_match(pair, rng):
    py, cy = pair
    states = []
    for kern in pair:
        p = np.linspace(-1, 1, 17)
        m, v = np.zeros(17), np.zeros(17)
        r = np.random.default_rng(3)
        for t in range(1, 6):
            kern.adam_update(p, r.normal(size=17), m, v, 1e-3, 0.9, 0.999, 1e-8,
                             1 - 0.9**t, 1 - 0.999**t)
        states.append((p, m, v))
    for a, b in zip(*states):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_rank_auc_match_with_ties(pair, rng):
    py, cy = pair
    for _ in range(50):
        a = np.round(rng.random(rng.integers(1, 60)), 1)
        b = np.round(rng.random(rng.integers(1, 60)), 1)
        assert py.rank_auc(a, b) == pytest.approx(cy.rank_auc(a, b), abs=1e-12)
