import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ltood.dataset import Dataset, SubsetPartition
from ltood.errors import ConfigError, NumericError, StrategyError
from ltood.mixup import (MixupStrategy, PairSampler, mix_inputs, mixup_ce_loss, sample_lambda,
                         sample_pair)


MIXUP_145_VALUE = 1.63954476622188450486892289315  # 0.3*ln(1+2e^-2) + 0.7*(2+ln(1+2e^-2)), mpmath


def test_strategy_names():
    assert [s.value for s in MixupStrategy] == ["standard", "mx1", "mx2", "mx3", "mx4", "mx5", "mx6"]
    assert MixupStrategy.parse("MX5") is MixupStrategy.MX5
    assert MixupStrategy.parse("none") is None
    with pytest.raises(ConfigError):
        MixupStrategy.parse("mx7")


@pytest.mark.parametrize("alpha", [0.05, 0.2, 1.0, 5.0])
def test_lambda_support(alpha):
    lam = sample_lambda(alpha, np.random.default_rng(0), size=2000)
    assert lam.min() >= 0.0 and lam.max() <= 1.0


def test_lambda_uniform_mean():
    lam = sample_lambda(1.0, np.random.default_rng(11), size=100_000)
    assert abs(lam.mean() - 0.5) < 0.01


def test_lambda_determinism_and_errors():
    assert sample_lambda(0.2, np.random.default_rng(4)) == sample_lambda(0.2, np.random.default_rng(4))
    with pytest.raises(ConfigError):
        sample_lambda(0.0, np.random.default_rng(0))


def test_mt_pairs_always_middle_tail(six_class_data, rng):
    ds, part = six_class_data
    for _ in range(200):
        pair = sample_pair(ds, part, MixupStrategy.MX5, 0.2, rng)
        assert pair.y_i in part.middle and pair.y_j in part.tail
        np.testing.assert_array_equal(pair.mixed_input, pair.lam * pair.x_i + (1 - pair.lam) * pair.x_j)


def test_intra_strategy_needs_two_classes(six_class_data):
    ds, _ = six_class_data
    part = SubsetPartition(frozenset({0, 1, 2, 3}), frozenset({4}), frozenset({5}), 1, 2)
    with pytest.raises(StrategyError, match="mx2"):
        PairSampler(ds, part, MixupStrategy.MX2)


def test_standard_selection_is_class_uniform():
    labels = np.repeat([0, 1, 2], [9000, 900, 100])
    ds = Dataset(np.zeros((10000, 1)), labels, 3)
    part = SubsetPartition(frozenset({0}), frozenset({1}), frozenset({2}), 1, 2)
    _, _, ci, cj, _ = PairSampler(ds, part, MixupStrategy.STANDARD).sample(10000, 0.2, np.random.default_rng(2))
    freq = np.bincount(ci, minlength=3) / 10000
    np.testing.assert_allclose(freq, 1 / 3, atol=0.02)
    assert (ci != cj).all()


def test_pair_sources_belong_to_their_classes(six_class_data, rng):
    ds, part = six_class_data
    xi, xj, ci, cj, lam = PairSampler(ds, part, MixupStrategy.MX4).sample(300, 0.4, rng)
    rows = {r.tobytes(): lab for r, lab in zip(ds.features, ds.labels)}
    assert all(rows[a.tobytes()] == c for a, c in zip(xi, ci))
    assert all(rows[b.tobytes()] == c for b, c in zip(xj, cj))
    np.testing.assert_allclose(mix_inputs(xi, xj, lam), lam[:, None] * xi + (1 - lam[:, None]) * xj, rtol=0, atol=0)


# -- loss ---------------------------------------------------------------------

def test_lambda_one_is_plain_ce(backend):
    z = np.array([0.3, -1.2, 2.2, 0.0])
    assert mixup_ce_loss(z, 2, 0, 1.0) == mixup_ce_loss(z, 2, 2, 1.0)


def test_uniform_logits_give_log_m(backend):
    assert mixup_ce_loss(np.full(45, 1.7), 3, 40, 0.37) == pytest.approx(math.log(45), abs=1e-12)


def test_mixup_reference_value(backend):
    assert mixup_ce_loss(np.array([2.0, 0.0, 0.0]), 0, 1, 0.3) == pytest.approx(MIXUP_145_VALUE, abs=1e-12)


def test_non_finite_logits_rejected():
    with pytest.raises(NumericError):
        mixup_ce_loss(np.array([np.nan, 0.0]), 0, 1, 0.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8), st.floats(0, 1), st.data())
def test_affine_in_lambda(z, lam, data):
    z = np.array(z)
    yi = data.draw(st.integers(0, len(z) - 1))
    yj = data.draw(st.integers(0, len(z) - 1))
    lhs = mixup_ce_loss(z, yi, yj, lam)
    rhs = lam * mixup_ce_loss(z, yi, yj, 1.0) + (1 - lam) * mixup_ce_loss(z, yi, yj, 0.0)
    assert lhs == pytest.approx(rhs, abs=1e-12)
    assert lhs >= 0
    assert mixup_ce_loss(z, yi, yi, lam) == pytest.approx(mixup_ce_loss(z, yi, yi, 0.5), abs=1e-12)


def test_membership_all_strategies(six_class_data):
    ds, part = six_class_data
    sets = {"head": part.head, "middle": part.middle, "tail": part.tail, "all": set(range(6))}
    for strat in MixupStrategy:
        _, _, ci, cj, _ = PairSampler(ds, part, strat).sample(2000, 0.2, np.random.default_rng(0))
        a, b = strat.subsets
        assert set(ci) <= sets[a] and set(cj) <= sets[b]
        assert (ci != cj).all()
