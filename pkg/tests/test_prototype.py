import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltood.dataset import Dataset
from ltood.diffcore import Encoder
from ltood.errors import DimensionError, InitError
from ltood.prototype import (PrototypeBank, dce_loss, init_prototypes, mixup_dce_loss, mixup_mse_loss,
                             squared_distances, standard_prototype_loss, total_mixup_prototype_loss)

# mpmath, 30 digits
LN1P_EXP_M3 = 0.0485873515737420587589259198547
MIXUP_DCE_REF = 2.14858735157374205875892591985
TOTAL_REF = 2.17958735157374205875892591985


@pytest.fixture
def two_class_bank():
    # f = (0, 0) sits at squared distance 1 from p0 and 4 from p1
    return PrototypeBank(np.array([[1.0, 0.0], [0.0, 2.0]]), gamma=1.0, w_mse=0.01)


F0 = np.zeros(2)


def test_squared_distances_basic(backend, rng):
    bank = PrototypeBank(rng.normal(size=(4, 3)))
    f = bank.prototypes[2].copy()
    assert squared_distances(f, bank)[2] == 0.0
    f[0] += 1.0
    assert squared_distances(f, bank)[2] == pytest.approx(1.0, abs=1e-15)
    g = rng.normal(size=3)
    manual = [sum((g[e] - bank.prototypes[k, e]) ** 2 for e in range(3)) for k in range(4)]
    np.testing.assert_allclose(squared_distances(g, bank), manual, atol=1e-12, rtol=0)


def test_squared_distances_dimension_error():
    with pytest.raises(DimensionError):
        squared_distances(np.zeros(3), PrototypeBank(np.zeros((2, 4))))


def test_dce_equidistant_is_log_m(backend):
    angles = np.linspace(0, 2 * np.pi, 45, endpoint=False)
    bank = PrototypeBank(np.stack([np.cos(angles), np.sin(angles)], 1))
    assert dce_loss(np.zeros(2), 7, bank) == pytest.approx(math.log(45), abs=1e-12)
    assert mixup_dce_loss(np.zeros(2), 7, 30, 0.2, bank) == pytest.approx(math.log(45), abs=1e-12)


def test_dce_limit_case(backend):
    bank = PrototypeBank(np.array([[0.0, 0.0], [1e3, 0.0], [0.0, -1e3]]))
    assert dce_loss(np.zeros(2), 0, bank) < 1e-6
    assert standard_prototype_loss(np.zeros(2), 0, bank) < 1e-6


def test_reference_values(backend, two_class_bank):
    b = two_class_bank
    assert dce_loss(F0, 0, b) == pytest.approx(LN1P_EXP_M3, abs=1e-12)
    assert standard_prototype_loss(F0, 0, b) == pytest.approx(LN1P_EXP_M3 + 0.01, abs=1e-12)
    assert mixup_mse_loss(F0, 0, 1, 0.3, b) == pytest.approx(3.1, abs=1e-12)
    assert mixup_dce_loss(F0, 0, 1, 0.3, b) == pytest.approx(MIXUP_DCE_REF, abs=1e-12)
    assert total_mixup_prototype_loss(F0, 0, 1, 0.3, b) == pytest.approx(TOTAL_REF, abs=1e-12)


def test_w_mse_zero_reduces_to_dce(backend, rng):
    bank = PrototypeBank(rng.normal(size=(5, 3)), w_mse=0.0)
    f = rng.normal(size=3)
    assert standard_prototype_loss(f, 2, bank) == dce_loss(f, 2, bank)
    assert total_mixup_prototype_loss(f, 2, 4, 0.6, bank) == mixup_dce_loss(f, 2, 4, 0.6, bank)


def test_lambda_one_degenerations(backend, rng):
    bank = PrototypeBank(rng.normal(size=(5, 3)), w_mse=0.3)
    f = rng.normal(size=3)
    assert mixup_mse_loss(f, 1, 3, 1.0, bank) == squared_distances(f, bank)[1]
    assert mixup_dce_loss(f, 1, 3, 1.0, bank) == dce_loss(f, 1, bank)
    assert total_mixup_prototype_loss(f, 1, 3, 1.0, bank) == standard_prototype_loss(f, 1, bank)


def test_equal_prototypes_make_mse_independent_of_lambda():
    bank = PrototypeBank(np.array([[1.0, 1.0], [1.0, 1.0], [0.0, 3.0]]))
    vals = [mixup_mse_loss(np.array([0.2, -0.4]), 0, 1, lam, bank) for lam in (0.0, 0.3, 1.0)]
    assert max(vals) - min(vals) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_affine_and_translation_invariant(seed, lam):
    r = np.random.default_rng(seed)
    bank = PrototypeBank(r.normal(size=(4, 3)) * 2, gamma=r.uniform(0.1, 2), w_mse=r.uniform(0, 1))
    f = r.normal(size=3) * 2
    for fn in (mixup_mse_loss, mixup_dce_loss, total_mixup_prototype_loss):
        full = fn(f, 0, 2, lam, bank)
        assert full == pytest.approx(lam * fn(f, 0, 2, 1.0, bank) + (1 - lam) * fn(f, 0, 2, 0.0, bank), abs=1e-10)
        t = r.normal(size=3) * 5
        moved = PrototypeBank(bank.prototypes + t, bank.gamma, bank.w_mse)
        assert fn(f + t, 0, 2, lam, moved) == pytest.approx(full, abs=1e-9)
        assert full >= 0


def test_init_prototypes_modes(rng):
    ds = Dataset(rng.normal(size=(7, 3)), [0, 0, 0, 1, 2, 2, 2], 3)
    enc = Encoder.create(3, hidden=(5,), embedding_dim=4, rng=rng)
    bank = init_prototypes(ds, enc, "class-mean")
    emb, _ = enc.forward(ds.features, cache=False)
    np.testing.assert_array_equal(bank.prototypes[1], emb[3])
    means = np.array([emb[ds.labels == k].mean(0) for k in range(3)])
    assert np.linalg.norm(bank.prototypes - means, axis=1).mean() < 1e-12
    a = init_prototypes(ds, enc, "random", rng=5)
    b = init_prototypes(ds, enc, "random", rng=5)
    np.testing.assert_array_equal(a.prototypes, b.prototypes)
    assert a.prototypes.shape == (3, 4)


def test_init_prototypes_errors(rng):
    enc = Encoder.create(2, embedding_dim=3, rng=rng)
    with pytest.raises(InitError, match="class 1"):
        init_prototypes(Dataset(np.zeros((2, 2)), [0, 0], 3), enc, "class-mean")
    with pytest.raises(InitError):
        init_prototypes(Dataset(np.zeros((2, 2)), [0, 0], 1), enc, "random")
