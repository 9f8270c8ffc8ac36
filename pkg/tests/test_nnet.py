import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calikd import nnet
from calikd.data import Dataset
from calikd.errors import DivergedTrainingError, DomainError, ShapeError, ValidationError
from calikd.nnet import MlpModel, TrainConfig

from oracles import central_difference, relative_error


def zero_model(dims):
    return MlpModel([np.zeros((a, b)) for a, b in zip(dims, dims[1:])], [np.zeros(b) for b in dims[1:]])


def blobs(n=200, seed=0, gap=4.0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 2)) + gap * np.stack([y, y], axis=1) - gap / 2
    return Dataset(x, y, 2)


# -- forward ----------------------------------------------------------------


def test_zero_model_gives_zero_logits():
    x = np.random.default_rng(1).standard_normal((5, 3))
    assert np.array_equal(nnet.forward(zero_model([3, 4, 2]), x), np.zeros((5, 2)))


def test_identity_layer_with_bias():
    model = MlpModel([np.eye(2)], [np.array([1.0, -1.0])])
    assert np.array_equal(nnet.forward(model, [[0.0, 0.0]]), [[1.0, -1.0]])


def test_two_layer_by_hand():
    w0 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b0 = np.array([0.0, -0.5])
    w1 = np.array([[1.0, 0.0, -1.0], [3.0, 1.0, 2.0]])
    b1 = np.array([0.1, 0.2, 0.3])
    model = MlpModel([w0, w1], [b0, b1])
    # x = [1, 1]: hidden pre = [1+2, -1+0.5-0.5] = [3, -1] -> relu [3, 0]
    # logits = [3*1 + 0, 0, -3] + b1
    assert np.allclose(nnet.forward(model, [[1.0, 1.0]]), [[3.1, 0.2, -2.7]], atol=1e-15)


def test_forward_shape_error_names_dims():
    with pytest.raises(ShapeError, match="3.*4"):
        nnet.forward(zero_model([4, 2]), np.zeros((1, 3)))


def test_model_rejects_broken_chain():
    with pytest.raises(ShapeError):
        MlpModel([np.zeros((2, 3)), np.zeros((4, 2))], [np.zeros(3), np.zeros(2)])
    with pytest.raises(ShapeError):
        MlpModel([np.zeros((2, 1))], [np.zeros(1)])


def test_init_scaling_and_zero_bias():
    model = MlpModel.init([400, 300, 10], seed=3)
    assert model.layer_dims == [400, 300, 10]
    assert all(not b.any() for b in model.biases)
    assert abs(model.weights[0].std() - math.sqrt(2 / 400)) < 0.002
    assert MlpModel.init([400, 300, 10], seed=3).equals(model)
    assert not MlpModel.init([400, 300, 10], seed=4).equals(model)


# -- loss and gradients -----------------------------------------------------


def test_uniform_prediction_loss_is_ln2():
    loss, _ = nnet.softmax_cross_entropy(np.zeros((1, 2)), np.array([1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_self_targets_give_zero_logit_gradient():
    z = np.random.default_rng(0).standard_normal((6, 4))
    for temp in (0.5, 1.0, 3.0):
        target = nnet.softmax(z / temp)
        _, grad = nnet.softmax_cross_entropy(z, target, temp)
        assert np.abs(grad).max() < 1e-15


@given(st.integers(0, 2**32 - 1), st.floats(0.2, 5.0), st.booleans())
def test_logit_gradient_rows_sum_to_zero(seed, temp, soft):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, 4)) * 3
    targets = rng.dirichlet(np.ones(4), size=5) if soft else rng.integers(0, 4, size=5)
    loss, grad = nnet.softmax_cross_entropy(z, targets, temp)
    assert loss >= 0
    assert np.abs(grad.sum(axis=1)).max() < 1e-9


def test_soft_targets_must_be_normalised():
    with pytest.raises(ValidationError):
        nnet.softmax_cross_entropy(np.zeros((1, 2)), np.array([[0.5, 0.6]]))


def test_non_positive_temperature_rejected():
    with pytest.raises(DomainError):
        nnet.softmax_cross_entropy(np.zeros((1, 2)), np.array([0]), 0.0)


def check_model_gradients(seed):
    """Max relative error between analytic and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    dims = [int(d) for d in rng.integers(2, 9, size=depth + 1)]
    model = MlpModel.init(dims, seed)
    for b in model.biases:
        b += rng.normal(scale=0.3, size=b.shape)
    n = int(rng.integers(1, 6))
    x = rng.standard_normal((n, dims[0]))
    temp = float(rng.uniform(0.5, 3.0))
    targets = rng.dirichlet(np.ones(dims[-1]), size=n) if rng.random() < 0.5 else rng.integers(0, dims[-1], size=n)
    _, grads = nnet.loss_and_grad(model, x, targets, temp)
    numeric = central_difference(lambda: nnet.loss_and_grad(model, x, targets, temp)[0], model.parameters())
    analytic = grads.weights + grads.biases
    return max(float(relative_error(a, m).max()) for a, m in zip(analytic, numeric))


@pytest.mark.parametrize("seed", range(10))
def test_gradient_check(seed):
    assert check_model_gradients(seed) < 1e-4


# -- optimiser / schedule ---------------------------------------------------


def _grads_like(model, value):
    return nnet.Gradients([np.full_like(w, value) for w in model.weights],
                          [np.full_like(b, value) for b in model.biases])


def test_plain_sgd_step():
    model = zero_model([2, 3])
    new, _ = nnet.sgd_step(model, _grads_like(model, 1.0), lr=0.1, momentum=0.0)
    assert all(np.allclose(p, -0.1) for p in new.parameters())
    assert all(not p.any() for p in model.parameters())


def test_zero_lr_is_identity():
    model = MlpModel.init([3, 4, 2], 0)
    new, _ = nnet.sgd_step(model, _grads_like(model, 5.0), lr=0.0, momentum=0.9)
    assert new.equals(model)


def test_momentum_two_steps():
    model = zero_model([1, 2])
    g = _grads_like(model, 1.0)
    model, v = nnet.sgd_step(model, g, 1.0, None, 0.9)
    model, v = nnet.sgd_step(model, g, 1.0, v, 0.9)
    assert all(np.allclose(p, -2.9, atol=1e-15) for p in model.parameters())


def test_sgd_shape_mismatch():
    model = zero_model([2, 3])
    bad = nnet.Gradients([np.ones((3, 2))], [np.ones(3)])
    with pytest.raises(ShapeError):
        nnet.sgd_step(model, bad, 0.1)


def test_cosine_lr_values():
    assert nnet.cosine_lr(0, 200, 0.1) == pytest.approx(0.1)
    assert nnet.cosine_lr(200, 200, 0.1) == pytest.approx(0.0, abs=1e-18)
    assert nnet.cosine_lr(100, 200, 0.1) == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(DomainError):
        nnet.cosine_lr(201, 200, 0.1)


@given(st.integers(1, 500), st.floats(1e-4, 10.0))
def test_cosine_lr_monotone_and_bounded(max_epochs, lr0):
    values = [nnet.cosine_lr(e, max_epochs, lr0) for e in range(max_epochs + 1)]
    assert all(0.0 <= v <= lr0 for v in values)
    assert all(b <= a for a, b in zip(values, values[1:]))


# -- training ---------------------------------------------------------------


def test_separable_blobs_are_learned():
    ds = blobs()
    cfg = TrainConfig(batch_size=32, max_epochs=20, seed=0)
    model, trace = nnet.train(MlpModel.init([2, 8, 2], 0), ds, cfg)
    assert nnet.accuracy(model, ds) >= 0.99
    assert len(trace.loss) == 20 and trace.lr[0] == 0.1


def test_training_is_deterministic():
    ds = blobs(seed=1)
    cfg = TrainConfig(batch_size=16, max_epochs=5, seed=7)
    m1, t1 = nnet.train(MlpModel.init([2, 6, 2], 1), ds, cfg)
    m2, t2 = nnet.train(MlpModel.init([2, 6, 2], 1), ds, cfg)
    assert m1.equals(m2)
    assert t1.loss == t2.loss and t1.accuracy == t2.accuracy


def test_zero_lr_training_keeps_initialisation():
    ds = blobs()
    init = MlpModel.init([2, 6, 2], 0)
    model, _ = nnet.train(init, ds, TrainConfig(batch_size=50, initial_lr=0.0, max_epochs=3))
    assert model.equals(init)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_epoch():
    ds = blobs()
    init = MlpModel.init([2, 6, 2], 0)
    with pytest.raises(DivergedTrainingError) as info:
        nnet.train(init, ds, TrainConfig(batch_size=50, initial_lr=1e300, momentum=0.0, max_epochs=3))
    assert info.value.epoch == 0


def test_batch_larger_than_dataset_rejected():
    with pytest.raises(ValidationError):
        nnet.train(MlpModel.init([2, 3, 2], 0), blobs(n=10), TrainConfig(batch_size=128))


def test_soft_target_training_runs():
    ds = blobs(n=64)
    soft = np.full((64, 2), 0.5)
    model, trace = nnet.train(MlpModel.init([2, 4, 2], 0), ds, TrainConfig(batch_size=16, max_epochs=2),
                              soft_targets=soft, temperature=2.0)
    assert trace.metadata["targets"] == "soft"
    assert model.is_finite()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63 - 1))
def test_parameters_stay_finite(seed):
    ds = blobs(n=40, seed=seed % 1000)
    model, _ = nnet.train(MlpModel.init([2, 5, 5, 2], seed), ds, TrainConfig(batch_size=8, max_epochs=2, seed=seed))
    assert model.is_finite()
