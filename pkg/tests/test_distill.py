import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calikd import calibration as cal, data, distill, nnet
from calikd.distill import DistillConfig, kd_loss, kd_loss_and_grad
from calikd.errors import ConfigurationError, DomainError, ShapeError
from calikd.nnet import MlpModel, TrainConfig

from oracles import central_difference, kl, relative_error


@pytest.fixture(scope="module")
def splits():
    spec = data.SyntheticSpec(class_count=3, dims=4, samples=300, label_noise_rate=0.1, seed=2)
    return data.split(data.generate_synthetic(spec), (0.6, 0.2, 0.2), seed=2)


def test_identical_logits_alpha_one_is_zero():
    z = np.random.default_rng(0).standard_normal((4, 5))
    assert kd_loss(z, z, np.zeros(4, dtype=int), 3.0, 1.0) == pytest.approx(0.0, abs=1e-15)


def test_alpha_zero_is_cross_entropy():
    rng = np.random.default_rng(1)
    zs, zt = rng.standard_normal((2, 6, 3))
    y = rng.integers(0, 3, 6)
    assert kd_loss(zs, zt, y, 2.0, 0.0) == nnet.softmax_cross_entropy(zs, y)[0]


def test_two_class_hand_value():
    p = [math.e / (math.e + 1), 1 / (math.e + 1)]
    expected = kl(p, [0.5, 0.5])
    assert expected == pytest.approx(0.110944, abs=1e-6)
    assert kd_loss([[0.0, 0.0]], [[1.0, 0.0]], [0], 1.0, 1.0) == pytest.approx(expected, abs=1e-12)


def test_temperature_squared_factor():
    zs, zt = np.array([[0.3, -0.2, 1.0]]), np.array([[2.0, 0.0, -1.0]])
    temp = 2.5
    pt = nnet.softmax(zt / temp)[0]
    ps = nnet.softmax(zs / temp)[0]
    assert kd_loss(zs, zt, [0], temp, 1.0) == pytest.approx(temp**2 * kl(pt, ps), rel=1e-12)


def test_kd_errors():
    with pytest.raises(ShapeError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 4)), [0, 0], 1.0, 0.5)
    with pytest.raises(DomainError):
        kd_loss(np.zeros((2, 3)), np.zeros((2, 3)), [0, 0], 0.0, 0.5)


@settings(deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.3, 8.0))
def test_kd_properties(seed, alpha, temp):
    rng = np.random.default_rng(seed)
    zs, zt = rng.standard_normal((2, 5, 4)) * 3
    y = rng.integers(0, 4, 5)
    loss, grad = kd_loss_and_grad(zs, zt, y, temp, alpha)
    assert loss >= -1e-12
    assert np.abs(grad.sum(axis=1)).max() < 1e-9
    shifted = zt + rng.normal(size=(5, 1)) * 10
    assert kd_loss(zs, shifted, y, temp, alpha) == pytest.approx(loss, abs=1e-9)


def check_kd_gradient(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
    zs = rng.standard_normal((n, k)) * 2
    zt = rng.standard_normal((n, k)) * 2
    y = rng.integers(0, k, n)
    temp, alpha = float(rng.uniform(0.5, 6.0)), float(rng.uniform(0, 1))
    _, grad = kd_loss_and_grad(zs, zt, y, temp, alpha)
    (numeric,) = central_difference(lambda: kd_loss(zs, zt, y, temp, alpha), [zs])
    return float(relative_error(grad, numeric).max())


@pytest.mark.parametrize("seed", range(10))
def test_kd_gradient_check(seed):
    assert check_kd_gradient(seed) < 1e-4


def test_effective_temperature():
    fit = cal.TemperatureFit(1.7, 1.0, 0.9, True, False, 10)
    assert DistillConfig(mode="vanilla", kd_temperature=3.0).effective_temperature(fit) == 3.0
    assert DistillConfig(mode="calibrated", kd_temperature=3.0).effective_temperature(fit) == 1.7
    with pytest.raises(ConfigurationError):
        DistillConfig(mode="calibrated").effective_temperature(None)


def _small_train(seed=0):
    return TrainConfig(batch_size=30, max_epochs=4, seed=seed)


def test_alpha_zero_matches_plain_training(splits):
    train_split = splits[0]
    teacher, _ = nnet.train(MlpModel.init([4, 32, 3], 9), train_split, _small_train(9))
    init = MlpModel.init([4, 6, 3], 1)
    plain, plain_trace = nnet.train(init, train_split, _small_train(1))
    student, trace = distill.distill_student(init, teacher, train_split,
                                             DistillConfig(alpha=0.0, train=_small_train(1)))
    assert student.equals(plain)
    assert trace.loss == plain_trace.loss and trace.accuracy == plain_trace.accuracy


def test_teacher_is_frozen_and_modes_differ_only_in_temperature(splits):
    train_split, val_split, _ = splits
    teacher, _ = nnet.train(MlpModel.init([4, 32, 3], 9), train_split, _small_train(9))
    snapshot = teacher.copy()
    fit = cal.fit_temperature(cal.model_logits(teacher, val_split))
    init = MlpModel.init([4, 6, 3], 1)
    _, vanilla = distill.distill_student(init, teacher, train_split, DistillConfig(train=_small_train()), fit)
    _, calibrated = distill.distill_student(init, teacher, train_split,
                                            DistillConfig(mode="calibrated", train=_small_train()), fit)
    assert teacher.equals(snapshot)
    diff = {k for k in vanilla.metadata if vanilla.metadata[k] != calibrated.metadata[k]}
    assert diff == {"mode", "effective_temperature"}
    assert vanilla.metadata["effective_temperature"] == 4.0
    assert calibrated.metadata["effective_temperature"] == fit.temperature


def test_self_distillation_starts_at_zero(splits):
    train_split = splits[0]
    model = MlpModel.init([4, 8, 3], 0)
    logits = nnet.forward(model, train_split.features)
    loss, grad = kd_loss_and_grad(logits, nnet.forward(model.copy(), train_split.features),
                                  train_split.labels, 4.0, 1.0)
    assert loss == pytest.approx(0.0, abs=1e-15)
    assert np.linalg.norm(grad) == pytest.approx(0.0, abs=1e-15)


def test_calibrated_without_fit_fails(splits):
    m = MlpModel.init([4, 8, 3], 0)
    with pytest.raises(ConfigurationError):
        distill.distill_student(m, m, splits[0], DistillConfig(mode="calibrated", train=_small_train()))


def test_single_size_sweep_has_two_rows(splits):
    table = distill.teacher_size_sweep([16], 4, splits, _small_train(), DistillConfig(), seeds=[0])
    assert [r.mode for r in table.rows] == ["vanilla", "calibrated"]
    assert table.rows[0].teacher_acc == table.rows[1].teacher_acc
    assert table.rows[1].effective_temperature == table.rows[1].temperature


def _table(values):
    rows = []
    for (t, s, mode), acc in values.items():
        rows.append(distill.SweepRow(t, s, 0, mode, 0.0, 0.0, 0.0, 1.0, 1.0, acc))
    return distill.ComparisonTable(rows)


# teacher -> student accuracies as reported for CIFAR-10 (vanilla, calibrated)
PUBLISHED_KD = {
    (50, 18): (0.9561, 0.9564), (50, 34): (0.9589, 0.9559),
    (101, 18): (0.9539, 0.9554), (101, 34): (0.9557, 0.9569), (101, 50): (0.9561, 0.9591),
    (152, 18): (0.9541, 0.9551), (152, 34): (0.9569, 0.9577), (152, 50): (0.9551, 0.9593),
    (152, 101): (0.9564, 0.9592),
}


def test_published_table_verdict():
    values = {}
    for (t, s), (v, c) in PUBLISHED_KD.items():
        values[(t, s, "vanilla")] = v
        values[(t, s, "calibrated")] = c
    table = _table(values)
    assert table.dominance_by_teacher() == {50: False, 101: True, 152: True}
    assert table.verdict() == "calibrated_dominates=false monotone_calibrated=false"


def test_verdict_true_case():
    table = _table({(8, 4, "vanilla"): 0.5, (8, 4, "calibrated"): 0.6,
                    (16, 4, "vanilla"): 0.55, (16, 4, "calibrated"): 0.6})
    assert table.verdict() == "calibrated_dominates=true monotone_calibrated=true"
    assert table.paired_win_fraction() == 1.0
