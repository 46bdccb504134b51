import numpy as np
import pytest

from ltood.diffcore import (Adam, Dense, Encoder, GradientTape, check_gradients, load_checkpoint,
                            save_checkpoint)
from ltood.errors import DimensionError, NumericError, StateError
from ltood.mixup import mixup_ce_rows
from ltood.prototype import PrototypeBank


def test_zero_encoder_gives_uniform_softmax():
    enc = Encoder([Dense(np.zeros((3, 2)), np.zeros(3)), Dense(np.zeros((4, 3)), np.zeros(4))],
                  Dense(np.zeros((5, 4)), np.zeros(5)))
    emb, logits = enc.forward(np.array([[1.0, -3.0], [2.0, 7.0]]))
    assert not emb.any() and not logits.any()
    rows, _ = mixup_ce_rows(logits, [0, 1], [0, 1], 1.0)
    np.testing.assert_allclose(rows, np.log(5))


def test_relu_clips_negatives():
    enc = Encoder([Dense(np.eye(2), np.zeros(2)), Dense(np.eye(2), np.zeros(2))])
    emb, logits = enc.forward(np.array([[-1.0, 2.0]]))
    assert logits is None
    np.testing.assert_array_equal(enc.hidden_activations()[1], [[0.0, 2.0]])
    np.testing.assert_array_equal(emb, [[0.0, 2.0]])


def test_forward_matches_handrolled_matmul(rng):
    enc = Encoder.create(5, hidden=(7,), embedding_dim=3, num_classes=4, rng=rng)
    x = rng.normal(size=(6, 5))
    emb, logits = enc.forward(x)
    L0, L1 = enc.layers
    h = [[max(0.0, sum(L0.weight[o, i] * x[b, i] for i in range(5)) + L0.bias[o]) for o in range(7)]
         for b in range(6)]
    e = [[sum(L1.weight[o, i] * h[b][i] for i in range(7)) + L1.bias[o] for o in range(3)] for b in range(6)]
    np.testing.assert_allclose(emb, e, atol=1e-12, rtol=0)
    z = [[sum(enc.head.weight[o, i] * e[b][i] for i in range(3)) + enc.head.bias[o] for o in range(4)]
         for b in range(6)]
    np.testing.assert_allclose(logits, z, atol=1e-12, rtol=0)


def test_forward_is_pure(rng):
    enc = Encoder.create(4, hidden=(8, 6), embedding_dim=3, num_classes=2, rng=rng)
    x = rng.normal(size=(5, 4))
    a = enc.forward(x)
    b = enc.forward(x)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_initialization_bounds_and_zero_bias():
    enc = Encoder.create(10, hidden=(20,), embedding_dim=6, rng=0)
    for layer in enc.layers:
        limit = np.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        assert np.abs(layer.weight).max() <= limit
        assert not layer.bias.any()


def test_dimension_errors(rng):
    with pytest.raises(DimensionError):
        Encoder([Dense(np.zeros((3, 2)), np.zeros(3)), Dense(np.zeros((2, 4)), np.zeros(2))])
    enc = Encoder.create(3, rng=rng)
    with pytest.raises(DimensionError):
        enc.forward(np.zeros((2, 4)))
    with pytest.raises(DimensionError):
        enc.forward(np.zeros((0, 3)))


def test_nonfinite_activation_names_layer():
    enc = Encoder([Dense(np.full((2, 2), 1e308), np.zeros(2)), Dense(np.eye(2), np.zeros(2))])
    with pytest.raises(NumericError, match="layer 0"):
        enc.forward(np.array([[10.0, 10.0]]))


def test_backward_without_forward_is_state_error(rng):
    enc = Encoder.create(3, rng=rng)
    with pytest.raises(StateError):
        enc.backward(grad_embeddings=np.zeros((1, 32)))
    enc.forward(np.zeros((1, 3)))
    enc.backward(grad_embeddings=np.zeros((1, 32)))
    with pytest.raises(StateError):
        enc.backward(grad_embeddings=np.zeros((1, 32)))


def test_ce_gradient_zero_at_onehot():
    z = np.array([[0.0, 800.0, 0.0]])
    _, g = mixup_ce_rows(z, [1], [1], 1.0)
    np.testing.assert_array_equal(g, 0.0)


def test_mixup_gradient_at_lambda_one_equals_ce(rng):
    z = rng.normal(size=(4, 5))
    _, g_mix = mixup_ce_rows(z, [0, 1, 2, 3], [4, 4, 0, 1], 1.0)
    _, g_ce = mixup_ce_rows(z, [0, 1, 2, 3], [0, 1, 2, 3], 1.0)
    np.testing.assert_array_equal(g_mix, g_ce)


def test_encoder_gradients_finite_difference(backend, rng):
    enc = Encoder.create(4, hidden=(6, 5), embedding_dim=3, num_classes=4, rng=rng)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)

    def fn():
        _, logits = enc.forward(x)
        rows, g = mixup_ce_rows(logits, y, y, 1.0, np.full(5, 0.2))
        return float(rows.mean()), enc.backward(grad_logits=g)

    assert check_gradients(fn, enc.parameters()) < 1e-5


# -- optimizer ----------------------------------------------------------------

def _scalar_params(value=0.5):
    return {"w": np.array([value])}


def test_zero_gradient_leaves_parameters(backend):
    params = {"w": np.array([0.3, -1.2])}
    opt = Adam(params, lr=0.1)
    for epoch in range(3):
        opt.step(params, GradientTape(0.0, {"w": np.zeros(2)}), epoch)
    np.testing.assert_array_equal(params["w"], [0.3, -1.2])
    assert not opt.m["w"].any() and not opt.v["w"].any()
    assert opt.step_count == 3


def test_first_step_moves_by_learning_rate(backend, rng):
    params = {"w": rng.normal(size=50)}
    before = params["w"].copy()
    opt = Adam(params, lr=1e-4, decay=0.95)
    g = rng.normal(size=50)
    opt.step(params, GradientTape(0.0, {"w": g}), epoch=2)
    step = np.abs(params["w"] - before)
    np.testing.assert_allclose(step, 1e-4 * 0.95**2, rtol=0.01)


def test_three_step_hand_recursion(backend):
    params = _scalar_params(0.5)
    opt = Adam(params, lr=0.01, decay=0.5, beta1=0.9, beta2=0.999, eps=1e-8)
    grads = [0.3, -0.1, 0.25]
    w, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        epoch = t - 1
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat = m / (1 - 0.9**t)
        vhat = v / (1 - 0.999**t)
        w = w - 0.01 * 0.5**epoch * mhat / (vhat**0.5 + 1e-8)
        opt.step(params, GradientTape(0.0, {"w": np.array([g])}), epoch)
    assert params["w"][0] == pytest.approx(w, abs=1e-12)
    assert opt.m["w"][0] == pytest.approx(m, abs=1e-12)


def test_optimizer_shape_mismatch():
    params = {"w": np.zeros(3)}
    opt = Adam(params)
    with pytest.raises(DimensionError):
        opt.step(params, GradientTape(0.0, {"w": np.zeros(4)}), 0)
    with pytest.raises(DimensionError):
        opt.step(params, GradientTape(0.0, {"other": np.zeros(3)}), 0)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    enc = Encoder.create(3, hidden=(4,), embedding_dim=2, rng=rng)
    bank = PrototypeBank(rng.normal(size=(3, 2)), gamma=0.7, w_mse=0.2)
    params = {**enc.parameters(), "prototypes": bank.prototypes}
    opt = Adam(params, lr=3e-4)
    opt.step(params, GradientTape(0.0, {k: np.ones_like(v) for k, v in params.items()}), 0)
    gen = np.random.default_rng(5)
    gen.random(3)
    path = save_checkpoint(tmp_path / "c.npz", enc, opt, bank, gen, {"epoch": 4})
    ck = load_checkpoint(path)
    for k, v in enc.parameters().items():
        np.testing.assert_array_equal(ck.encoder.parameters()[k], v)
    np.testing.assert_array_equal(ck.bank.prototypes, bank.prototypes)
    assert (ck.bank.gamma, ck.bank.w_mse) == (0.7, 0.2)
    assert ck.optimizer.step_count == 1 and ck.optimizer.lr == 3e-4
    np.testing.assert_array_equal(ck.optimizer.v["prototypes"], opt.v["prototypes"])
    assert ck.rng.random() == gen.random()
    assert ck.meta == {"epoch": 4}


def test_checkpoint_bytes_are_reproducible(tmp_path):
    enc = Encoder.create(3, rng=0)
    a = save_checkpoint(tmp_path / "a.npz", enc).read_bytes()
    b = save_checkpoint(tmp_path / "b.npz", enc).read_bytes()
    assert a == b
