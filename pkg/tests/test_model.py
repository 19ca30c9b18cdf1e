import numpy as np
import pytest

from memhist.model import (
    Batch, Dataset, DimensionError, DivergenceError, ModelSpec, NormState, ObjectiveSpec, barrier_scan,
    dataset_from_bytes, dataset_to_bytes, eval_loss, forward, init_model, loss_and_grad, make_synthetic,
    make_task_data, recalibrated_norm,
)
from memhist.optim import Schedule, sgd_momentum, step
from memhist.rng import RngStream, derive_seed
from memhist.statekit import bn_recalibrate
from oracles import FD_RTOL, gradient_error, random_instance


@pytest.mark.parametrize("objective", ["supervised", "teacher_consistency", "contrastive"])
def test_gradients_match_finite_differences(objective):
    rng = np.random.default_rng(11)
    for _ in range(10):
        assert gradient_error(*random_instance(rng, objective)) < FD_RTOL


def test_ten_parameter_linear_gradient():
    spec = ModelSpec("linear", 4, 2)  # 4*2 + 2 = 10 parameters
    params = init_model(spec, RngStream("init", 1))
    assert len(params) == 10
    rng = np.random.default_rng(0)
    batch = Batch(np.arange(5), rng.standard_normal((5, 4)), rng.standard_normal((5, 2)))
    assert gradient_error(spec, params, batch, None, ObjectiveSpec(), None, None) < FD_RTOL


def test_init_depends_on_stream_name():
    spec = ModelSpec("mlp", 3, 2, (4,))
    a = init_model(spec, RngStream("init", derive_seed(0, "init")))
    b = init_model(spec, RngStream("model", derive_seed(0, "model")))
    assert not np.array_equal(a.values, b.values)
    again = init_model(spec, RngStream("init", derive_seed(0, "init")))
    assert np.array_equal(a.values, again.values)


def test_bn_recalibration_fixed_point():
    spec = ModelSpec("mlp", 5, 3, (6, 4), norm=True)
    params = init_model(spec, RngStream("init", 3))
    x = np.random.default_rng(2).standard_normal((16, 5))
    calibrated = bn_recalibrate(spec, params, NormState.fresh(spec), x)
    train = forward(spec, params, x, NormState.fresh(spec), "train").values
    evald = forward(spec, params, x, calibrated, "eval").values
    assert np.max(np.abs(train - evald)) < 1e-6


def test_recalibration_is_identity_without_norm():
    spec = ModelSpec("mlp", 2, 2, (3,))
    norm = NormState.fresh(spec)
    assert recalibrated_norm(spec, init_model(spec, RngStream("i", 0)), norm, np.zeros((4, 2))) is norm


def test_running_stats_update():
    spec = ModelSpec("mlp", 2, 2, (3,), norm=True)
    params = init_model(spec, RngStream("i", 0))
    x = np.random.default_rng(0).standard_normal((8, 2))
    _, _, norm = loss_and_grad(spec, params, Batch(np.arange(8), x, np.zeros(8, int)), NormState.fresh(spec))
    u = x @ params["l0.W"]
    np.testing.assert_allclose(norm.layers[0].running_mean, 0.1 * u.mean(axis=0))
    np.testing.assert_allclose(norm.layers[0].running_var, 0.9 + 0.1 * u.var(axis=0))


def test_logistic_trains_to_high_accuracy():
    data = make_synthetic("classify", 100, 2, 0.5, RngStream("data", 4), separation=4.0)
    spec = ModelSpec("logistic", 2, 2)
    params = init_model(spec, RngStream("init", 4))
    opt = sgd_momentum(params, 0.9)
    sched = Schedule(0.5)
    batch = data.batch(data.ids)
    for t in range(200):
        _, g, _ = loss_and_grad(spec, params, batch, None)
        params, opt = step(params, g, opt, sched, t)
    preds = forward(spec, params, data.inputs).values.argmax(axis=1)
    assert (preds == data.targets).mean() >= 0.95


def test_barrier_scan_convex_path():
    data = make_synthetic("regress", 64, 3, 0.2, RngStream("data", 1))
    spec = ModelSpec("linear", 3, 1)
    a = init_model(spec, RngStream("a", 1))
    b = init_model(spec, RngStream("b", 2))
    scan = barrier_scan(spec, a, b, data, 11)
    ends = max(scan[0][1], scan[-1][1])
    assert all(loss <= ends + 1e-12 for _, loss in scan)
    assert scan[0][1] == pytest.approx(eval_loss(spec, a, data))


def test_dimension_errors():
    spec = ModelSpec("linear", 3, 1)
    params = init_model(spec, RngStream("i", 0))
    with pytest.raises(DimensionError):
        forward(spec, params, np.zeros((2, 4)))
    with pytest.raises(ValueError):
        ModelSpec("linear", 3, 1, (4,))
    with pytest.raises(ValueError):
        ModelSpec("resnet", 3, 1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_detected():
    spec = ModelSpec("linear", 1, 1)
    params = init_model(spec, RngStream("i", 0)).with_values(np.array([1e308, 0.0]))
    batch = Batch(np.arange(1), np.array([[1e10]]), np.array([[0.0]]))
    with pytest.raises(DivergenceError):
        loss_and_grad(spec, params, batch, None)


def test_contrastive_needs_pairs_and_teacher_needs_weights():
    spec = ModelSpec.embedder(3, 2)
    params = init_model(spec, RngStream("i", 0))
    batch = Batch(np.arange(2), np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ValueError):
        loss_and_grad(spec, params, batch, None, ObjectiveSpec("contrastive"))
    with pytest.raises(ValueError):
        loss_and_grad(spec, params, batch, None, ObjectiveSpec("teacher_consistency"))


def test_uniform_weights_match_unweighted():
    spec = ModelSpec("logistic", 3, 3)
    params = init_model(spec, RngStream("i", 5))
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((6, 3)), rng.integers(0, 3, 6)
    plain = loss_and_grad(spec, params, Batch(np.arange(6), x, y), None)
    ones = loss_and_grad(spec, params, Batch(np.arange(6), x, y, weights=np.ones(6)), None)
    assert plain[0] == ones[0]
    np.testing.assert_array_equal(plain[1].values, ones[1].values)


def test_augmentation_depends_only_on_seed():
    data = make_synthetic("regress", 10, 2, 0.1, RngStream("d", 0))
    a = data.batch([1, 2], aug_noise=0.1, aug_seeds=np.array([7, 8], dtype=np.uint64))
    b = data.batch([2, 1], aug_noise=0.1, aug_seeds=np.array([8, 7], dtype=np.uint64))
    np.testing.assert_array_equal(a.inputs[0], b.inputs[1])


def test_dataset_and_probe_roundtrip():
    data, probe = make_task_data("contrastive", 20, 5, 3, 0.3, RngStream("d", 2), n_classes=3)
    for obj in (data, probe):
        back = dataset_from_bytes(dataset_to_bytes(obj))
        np.testing.assert_array_equal(back.inputs, obj.inputs)
        np.testing.assert_array_equal(back.targets, obj.targets)
    assert dataset_to_bytes(dataset_from_bytes(dataset_to_bytes(data))) == dataset_to_bytes(data)
    assert not probe.inputs.flags.writeable


def test_datasets_are_immutable():
    data = Dataset(np.zeros((3, 2)), np.zeros(3), "regress")
    with pytest.raises(ValueError):
        data.inputs[0, 0] = 1.0
