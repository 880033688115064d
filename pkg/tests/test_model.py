import math

import numpy as np
import pytest

from fedtwin.errors import ConfigError, ShapeError, StateError
from fedtwin.gradcheck import REL_TOL, check_model, random_case
from fedtwin.model import (GruLayerParams, ModelConfig, Sample, Seq2seqModel, gru_cell_forward,
                           mse_loss, stack_samples)
from fedtwin.numerics import ParamStore, SeededRng, sgd_step

from conftest import make_samples


def zero_model(config: ModelConfig) -> Seq2seqModel:
    model = Seq2seqModel(config, seed=0)
    for e in model.params:
        e.value[...] = 0.0
    return model


def gru_layer(hidden: int, inputs: int, seed: int = 0, scale: float = 0.0) -> GruLayerParams:
    store = ParamStore()
    rng = SeededRng(seed)
    for gate in "zrh":
        for name, shape in ((f"W_{gate}", (hidden, inputs)), (f"U_{gate}", (hidden, hidden)), (f"b_{gate}", (hidden, 1))):
            vals = np.array([rng.uniform(-scale, scale) for _ in range(shape[0] * shape[1])]).reshape(shape)
            store.add(f"l.{name}", vals)
    return GruLayerParams.from_store(store, "l")


def scalar_gru(x, h, p: GruLayerParams):
    """Loop-by-loop GRU cell, written from the gate equations."""
    sig = lambda a: 1.0 / (1.0 + math.exp(-a))
    H, D = len(h), len(x)

    def affine(W, U, b, hv, i):
        return sum(W[i, j] * x[j] for j in range(D)) + sum(U[i, k] * hv[k] for k in range(H)) + b[i, 0]

    z = [sig(affine(p.W_z, p.U_z, p.b_z, h, i)) for i in range(H)]
    r = [sig(affine(p.W_r, p.U_r, p.b_r, h, i)) for i in range(H)]
    rh = [r[i] * h[i] for i in range(H)]
    cand = [math.tanh(affine(p.W_h, p.U_h, p.b_h, rh, i)) for i in range(H)]
    return [(1 - z[i]) * h[i] + z[i] * cand[i] for i in range(H)]


# -- GRU cell -----------------------------------------------------------------

def test_gru_cell_zero_params():
    p = gru_layer(2, 3)
    h, _ = gru_cell_forward(np.array([0.3, -1.0, 2.0]), np.zeros(2), p)
    assert h.tolist() == [0.0, 0.0]
    h, _ = gru_cell_forward(np.array([0.3, -1.0, 2.0]), np.ones(2), p)
    assert h.tolist() == [0.5, 0.5]


def test_gru_cell_matches_scalar_oracle():
    p = gru_layer(5, 3, seed=4, scale=0.8)
    rng = SeededRng(9)
    for _ in range(10):
        x = np.array([rng.uniform(-1, 1) for _ in range(3)])
        h_prev = np.array([rng.uniform(-1, 1) for _ in range(5)])
        h, _ = gru_cell_forward(x, h_prev, p)
        np.testing.assert_allclose(h, scalar_gru(x, h_prev, p), rtol=0, atol=1e-14)
        assert np.all(np.abs(h) <= np.maximum(np.abs(h_prev), 1.0))


def test_gru_cell_batch_rows_are_independent():
    p = gru_layer(4, 2, seed=1, scale=1.0)
    x = np.array([[0.1, 0.9], [0.5, -0.3], [1.0, 0.0]])
    h0 = np.array([[0.2, -0.1, 0.0, 0.4], [0.0] * 4, [-0.5, 0.5, 0.1, 0.0]])
    batched, _ = gru_cell_forward(x, h0, p)
    for i in range(3):
        single, _ = gru_cell_forward(x[i], h0[i], p)
        np.testing.assert_allclose(batched[i], single, rtol=0, atol=1e-15)


def test_gru_cell_shape_error():
    with pytest.raises(ShapeError):
        gru_cell_forward(np.zeros(4), np.zeros(2), gru_layer(2, 3))


# -- model structure ----------------------------------------------------------

def test_param_order_is_canonical(tiny_config):
    names = Seq2seqModel(tiny_config).params.names
    gru = ["W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"]
    expected = [f"encoder.{l}.{n}" for l in range(3) for n in gru] + [f"decoder.gru.{n}" for n in gru]
    expected += [f"decoder.fc.{i}.{n}" for i in range(3) for n in ("weight", "bias")]
    assert names == expected
    shapes = dict((n, (r, c)) for n, r, c in Seq2seqModel(tiny_config).params.manifest())
    assert shapes["encoder.0.W_z"] == (4, 3)
    assert shapes["encoder.1.W_z"] == (4, 4)
    assert shapes["decoder.gru.W_h"] == (4, 2)
    assert shapes["decoder.fc.0.weight"] == (4, 4)
    assert shapes["decoder.fc.2.weight"] == (1, 3)


def test_same_seed_same_params_different_seed_differs(tiny_config):
    a, b, c = Seq2seqModel(tiny_config, 5), Seq2seqModel(tiny_config, 5), Seq2seqModel(tiny_config, 6)
    assert all(np.array_equal(x, y) for x, y in zip(a.params.values(), b.params.values()))
    assert not all(np.array_equal(x, y) for x, y in zip(a.params.values(), c.params.values()))


@pytest.mark.parametrize("kwargs", [dict(plan_dim=0), dict(hidden_size=-1), dict(fc_widths=(3,)),
                                    dict(num_encoder_layers=0)])
def test_model_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


# -- forward ------------------------------------------------------------------

def test_zero_model_encodes_and_predicts_zero(tiny_config):
    model = zero_model(tiny_config)
    s = make_samples(1)[0]
    hidden = model.encode(s.history)
    assert len(hidden) == 3 and all(h.shape == (4,) and not h.any() for h in hidden)
    assert model.predict(s).tolist() == [0.0] * 7


def test_encode_is_order_sensitive(tiny_config):
    model, s = random_case(3)
    a = model.encode(s.history)[-1]
    b = model.encode(s.history[::-1])[-1]
    assert not np.allclose(a, b)


def test_first_future_plan_affects_every_step():
    # a wider head keeps some ReLU units live at every step
    model, s = random_case(4, hidden_size=8, fc_widths=(16, 8))
    base = model.predict(s)
    plans = s.future_plans.copy()
    plans[0] = 1.0 - plans[0]
    changed = model.forward(s.history, plans)
    assert base.shape == (7,)
    assert np.all(base != changed)


def test_input_shape_errors(tiny_config):
    model = Seq2seqModel(tiny_config)
    s = make_samples(1)[0]
    with pytest.raises(ShapeError):
        model.encode(s.history[:13])
    with pytest.raises(ShapeError):
        model.forward(s.history, s.future_plans[:6])


def test_batched_forward_matches_per_sample():
    model, _ = random_case(7)
    samples = make_samples(5)
    data = stack_samples(samples)
    batch = model.forward(data.history, data.future_plans)
    for i, s in enumerate(samples):
        np.testing.assert_allclose(batch[i], model.predict(s), rtol=0, atol=1e-15)


# -- loss ---------------------------------------------------------------------

def test_mse_examples():
    assert mse_loss(np.array([0.0, 0.0]), np.array([1.0, 3.0])) == 5.0
    assert mse_loss(np.ones(7), np.ones(7)) == 0.0
    pred, target = np.array([0.2, -0.4, 1.0]), np.array([0.5, 0.5, 0.5])
    assert math.isclose(mse_loss(3 * pred, 3 * target), 9 * mse_loss(pred, target), rel_tol=1e-14)
    with pytest.raises(ShapeError):
        mse_loss(np.zeros(7), np.zeros(6))


# -- backward -----------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_extended_precision_finite_differences(seed):
    model, sample = random_case(seed)
    worst = max(float(err.max()) for err in check_model(model, sample).values())
    assert worst < REL_TOL


def test_gradients_are_zero_at_zero_loss():
    model, s = random_case(2)
    pred = model.predict(s)
    model.backward(pred, pred.copy())
    assert all(not e.grad.any() for e in model.params)


def test_duplicated_sample_leaves_mean_gradient_unchanged():
    model, s = random_case(5)
    one = stack_samples([s])
    two = stack_samples([s, s])
    model.loss_and_grad(one)
    g1 = model.params.grads()
    model.params.zero_grad()
    model.loss_and_grad(two)
    for a, b in zip(g1, model.params.grads()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-18)


def test_backward_requires_matching_forward(tiny_config):
    model = Seq2seqModel(tiny_config)
    s = make_samples(1)[0]
    with pytest.raises(StateError):
        model.backward(np.zeros(7), s.targets)
    pred = model.predict(s)
    model.backward(pred, s.targets)
    with pytest.raises(StateError):  # the cache is consumed
        model.backward(pred, s.targets)
    data = stack_samples(make_samples(3))
    pred = model.forward(data.history, data.future_plans)
    with pytest.raises(StateError):
        model.backward(pred[:2], data.targets[:2])


# -- training -----------------------------------------------------------------

def test_train_epoch_zero_lr(tiny_config):
    model = Seq2seqModel(tiny_config, seed=1)
    samples = make_samples(10)
    before = model.params.values()
    loss = model.train_epoch(samples, batch_size=60, lr=0.0)
    assert all(np.array_equal(a, b) for a, b in zip(before, model.params.values()))
    assert math.isclose(loss, model.evaluate(samples), rel_tol=1e-12)


def test_single_sample_epoch_is_one_sgd_step(tiny_config):
    s = make_samples(1)[0]
    model, manual = Seq2seqModel(tiny_config, 3), Seq2seqModel(tiny_config, 3)
    model.train_epoch([s], batch_size=60, lr=0.1)
    manual.backward(manual.predict(s), s.targets)
    sgd_step(manual.params, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(model.params.values(), manual.params.values()))


def test_train_epoch_rejects_empty_and_bad_batch(tiny_config):
    model = Seq2seqModel(tiny_config)
    with pytest.raises(ValueError):
        model.train_epoch([], 60, 0.005)
    with pytest.raises(ConfigError):
        model.train_epoch(make_samples(2), 0, 0.005)


def test_training_is_bit_deterministic(tiny_config):
    samples = make_samples(25)
    runs = []
    for _ in range(2):
        model = Seq2seqModel(tiny_config, seed=8)
        losses = [model.train_epoch(samples, 7, 0.05) for _ in range(5)]
        runs.append((losses, model.params.values()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_constant_task_is_learned():
    config = ModelConfig(plan_dim=2, hidden_size=8)
    hist = np.tile([0.6, 0.0, 1.0], (14, 1))
    s = Sample(hist, np.tile([0.0, 1.0], (7, 1)), np.full(7, 0.6))
    samples = [s] * 8
    model = Seq2seqModel(config, seed=0)
    initial = model.evaluate(samples)
    for _ in range(200):
        model.train_epoch(samples, batch_size=60, lr=0.005)
    assert model.evaluate(samples) < 0.01 * initial
