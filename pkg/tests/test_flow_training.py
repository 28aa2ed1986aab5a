import math
from dataclasses import replace

import numpy as np
import pytest

from exceptions import DataError, DivergenceError, InputError
from flow_model import (
    EvalMode,
    FlowArchitecture,
    build_appendix_flow,
    build_flow,
    build_identity_flow,
    flatten_parameters,
    model_parameters,
)
from flow_training import (
    LOG_COLUMNS,
    Adam,
    EnsembleSpec,
    TrainConfig,
    calibrate_running_stats,
    fit_flow,
    loss_and_grad,
    train_ensemble,
    train_mle,
)
from synthetic_data import Dataset


def _numeric_grad(model, x, name, index, h=1e-5):
    param = model_parameters(model)[name]
    original = param.flat[index]
    param.flat[index] = original + h
    plus, _ = loss_and_grad(model, x)
    param.flat[index] = original - h
    minus, _ = loss_and_grad(model, x)
    param.flat[index] = original
    return (plus - minus) / (2 * h)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    arch = FlowArchitecture(dim=3, n_layers=2, hidden=5, n_hidden=1 + seed % 2)
    model = build_flow(arch, seed=seed)
    params = model_parameters(model)
    # Ненулевые смещения и BN-параметры, чтобы проверить все ветви
    for value in params.values():
        value += 0.1 * rng.normal(size=value.shape)
    x = rng.normal(size=(8, 3))

    _, grads = loss_and_grad(model, x)
    assert set(grads) == set(params)
    names = sorted(params)
    for _ in range(12):
        name = names[rng.integers(len(names))]
        index = int(rng.integers(params[name].size))
        numeric = _numeric_grad(model, x, name, index)
        analytic = grads[name].flat[index]
        assert abs(numeric - analytic) <= 1e-4 * abs(analytic) + 1e-7, name


def test_identity_flow_shift_gradient_is_batch_mean(rng):
    model = build_identity_flow(4)
    x = rng.normal(size=(10, 4))
    loss, grads = loss_and_grad(model, x)
    # z = x, d loss / d t = mean(z) по преобразуемым координатам
    np.testing.assert_allclose(grads['layers.0.t_net.1.bias'], x[:, [1, 3]].mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(grads['layers.1.t_net.1.bias'], x[:, [0, 2]].mean(axis=0), rtol=1e-12)
    expected = 0.5 * np.mean(np.sum(x ** 2, axis=1)) + 2 * math.log(2 * math.pi)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_duplicated_rows_give_finite_loss(small_flow, rng):
    row = rng.normal(size=(1, 3))
    loss, grads = loss_and_grad(small_flow, np.repeat(row, 8, axis=0))
    assert math.isfinite(loss)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_adam_first_step_moves_by_learning_rate():
    value = np.array([1.0, -2.0])
    optimizer = Adam(learning_rate=0.1)
    optimizer.step({'w': value}, {'w': np.array([2.0, -0.5])})
    np.testing.assert_allclose(value, [0.9, -1.9], atol=1e-6)
    assert optimizer.t == 1


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(batch_size=1)
    with pytest.raises(InputError):
        TrainConfig(steps=-1)
    with pytest.raises(InputError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(InputError):
        TrainConfig(bn_momentum=1.0)


def test_zero_steps_returns_unchanged_copy(small_flow, rng):
    data = Dataset(rng.normal(size=(64, 3)))
    trained, log = fit_flow(small_flow, data, TrainConfig(batch_size=16, steps=0))
    assert trained is not small_flow
    np.testing.assert_array_equal(flatten_parameters(trained), flatten_parameters(small_flow))
    assert list(log.columns) == LOG_COLUMNS
    assert len(log) == 0


def test_training_is_deterministic(small_flow, rng):
    data = Dataset(rng.normal(size=(200, 3)))
    cfg = TrainConfig(batch_size=16, steps=30, learning_rate=1e-2, seed=5)
    a, log_a = fit_flow(small_flow, data, cfg)
    b, log_b = fit_flow(small_flow, data, cfg)
    np.testing.assert_array_equal(flatten_parameters(a), flatten_parameters(b))
    np.testing.assert_array_equal(log_a['train_loss_nats'].values, log_b['train_loss_nats'].values)
    for sa, sb in zip(a.batchnorm_states, b.batchnorm_states):
        np.testing.assert_array_equal(sa.running_mean, sb.running_mean)
        np.testing.assert_array_equal(sa.running_var, sb.running_var)
    # исходная модель не меняется
    assert not np.array_equal(flatten_parameters(a), flatten_parameters(small_flow))


def test_training_log_columns_and_holdout_schedule(small_flow, rng):
    data = Dataset(rng.normal(size=(128, 3)))
    holdout = Dataset(rng.normal(size=(32, 3)))
    cfg = TrainConfig(batch_size=16, steps=25, learning_rate=1e-2, eval_every=10)
    _, log = fit_flow(small_flow, data, cfg, holdout=holdout)
    assert list(log['step']) == list(range(1, 26))
    evaluated = log.loc[log['eval_bpd_holdout'].notna(), 'step'].tolist()
    assert evaluated == [10, 20, 25]


def test_training_requires_enough_data(small_flow, rng):
    with pytest.raises(DataError):
        fit_flow(small_flow, Dataset(rng.normal(size=(10, 3))), TrainConfig(batch_size=16, steps=1))


def test_divergence_reports_step_and_seed():
    model = build_identity_flow(2, batchnorm=False)
    data = Dataset(np.full((8, 2), 1e200))
    with pytest.raises(DivergenceError) as info:
        with np.errstate(over='ignore', invalid='ignore'):
            fit_flow(model, data, TrainConfig(batch_size=4, steps=5, seed=9))
    assert info.value.step == 1
    assert info.value.seed == 9


def test_running_mean_tracks_activation_mean():
    rng = np.random.default_rng(3)
    data = Dataset(rng.normal(loc=[1.0, -0.5, 2.0], scale=[0.5, 1.5, 1.0], size=(4096, 3)))
    model = build_flow(FlowArchitecture(dim=3, n_layers=1, hidden=4), seed=1)
    cfg = TrainConfig(batch_size=64, steps=300, learning_rate=1e-9, bn_momentum=0.1)
    trained, _ = fit_flow(model, data, cfg)

    dense = trained.layers[0].s_net.layers[0]
    activations = data.data[:, trained.layers[0].mask] @ dense.weight + dense.bias
    mean = activations.mean(axis=0)
    std = activations.std(axis=0)
    m, b = cfg.bn_momentum, cfg.batch_size
    tolerance = 5 * std * math.sqrt(m / ((2 - m) * b))
    assert np.all(np.abs(dense.batchnorm.running_mean - mean) <= tolerance)
    assert dense.batchnorm.momentum == m


def test_calibration_uses_average_batch_statistics(appendix_p):
    model = build_appendix_flow()
    calibrated = calibrate_running_stats(model, appendix_p, batch_size=64, seed=0)
    state = calibrated.batchnorm_states[0]
    x1 = appendix_p.data[:, 0]
    assert state.running_mean[0] == pytest.approx(x1.mean(), abs=1e-12)
    assert state.running_var[0] == pytest.approx(x1.var(), rel=0.02)
    np.testing.assert_array_equal(flatten_parameters(calibrated), flatten_parameters(model))
    assert model.batchnorm_states[0].running_var[0] == 1.0


def test_appendix_training_shrinks_gamma(appendix_p):
    model = build_appendix_flow()
    cfg = TrainConfig(batch_size=64, steps=300, learning_rate=1e-2, seed=0)
    trained, log = fit_flow(model, appendix_p, cfg)
    params = model_parameters(trained)
    gamma = params['layers.0.t_net.0.gamma'][0]
    beta = params['layers.0.t_net.0.beta'][0]
    assert abs(beta) < 0.1
    assert abs(gamma) < 0.5
    loss = log['train_loss_nats'].values
    assert loss[-100:].mean() < loss[:100].mean()
    # замороженные линейные слои не меняются
    np.testing.assert_array_equal(params['layers.0.t_net.0.weight'], np.eye(1))


def test_ensemble_of_one_equals_single_training(rng):
    data = Dataset(rng.normal(size=(96, 3)))
    arch = FlowArchitecture(dim=3, n_layers=2, hidden=4)
    cfg = TrainConfig(batch_size=16, steps=5)
    members = train_ensemble(EnsembleSpec(k=1, base_seed=3, train=cfg, architecture=arch), data)
    single = train_mle(build_flow(arch, 3), data, replace(cfg, seed=3))
    assert len(members) == 1
    np.testing.assert_array_equal(flatten_parameters(members[0]), flatten_parameters(single))


def test_ensemble_members_differ_and_threads_do_not_matter(rng, monkeypatch):
    data = Dataset(rng.normal(size=(96, 3)))
    spec = EnsembleSpec(k=2, base_seed=0, train=TrainConfig(batch_size=16, steps=5),
                        architecture=FlowArchitecture(dim=3, n_layers=2, hidden=4))
    serial = train_ensemble(spec, data)
    monkeypatch.setenv('OODNORM_THREADS', '2')
    parallel = train_ensemble(spec, data)

    assert not np.array_equal(flatten_parameters(serial[0]), flatten_parameters(serial[1]))
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(flatten_parameters(a), flatten_parameters(b))


def test_ensemble_spec_validation():
    with pytest.raises(InputError):
        EnsembleSpec(k=0)


def test_trained_model_scores_training_data_higher(rng):
    data = Dataset(rng.normal(loc=2.0, scale=0.3, size=(512, 2)))
    model = build_flow(FlowArchitecture(dim=2, n_layers=2, hidden=8), seed=0)
    trained, log = fit_flow(model, data, TrainConfig(batch_size=64, steps=200, learning_rate=1e-2))
    assert log['train_loss_nats'].iloc[-20:].mean() < log['train_loss_nats'].iloc[:20].mean()
    assert trained.log_likelihood(data.data, EvalMode.EVALUATION).mean() > model.log_likelihood(data.data).mean()
