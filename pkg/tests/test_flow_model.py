import math

import numpy as np
import pytest

from exceptions import DegenerateBatchError, DimensionMismatchError, InputError
from flow_model import (
    Batch,
    BatchNormState,
    EvalMode,
    FlowArchitecture,
    alternating_mask,
    batchnorm_forward,
    bpd,
    build_affine_flow,
    build_appendix_flow,
    build_flow,
    build_identity_flow,
    build_scaling_flow,
    flatten_parameters,
    flow_forward,
    flow_inverse,
    forward_with_cache,
    load_model,
    log_likelihood,
    mixed_conditional_loglik,
    model_parameters,
    set_parameters,
    save_model,
)
from flow_training import TrainConfig, fit_flow
from synthetic_data import Dataset


# --- BatchNorm ---------------------------------------------------------------

def test_batchnorm_training_uses_unbiased_variance():
    state = BatchNormState(gamma=[1.0], beta=[0.0], eps=0.0, running_mean=[0.0], running_var=[1.0], momentum=0.1)
    out, (mu, var) = batchnorm_forward(state, np.array([[1.0], [3.0]]), EvalMode.TRAINING)
    np.testing.assert_allclose(out[:, 0], [-1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=1e-12)
    assert mu[0] == pytest.approx(2.0)
    assert var[0] == pytest.approx(2.0)


def test_batchnorm_evaluation_identity_with_unit_running_stats(rng):
    state = BatchNormState(gamma=np.ones(3), beta=np.zeros(3), eps=0.0,
                           running_mean=np.zeros(3), running_var=np.ones(3), momentum=0.1)
    x = rng.normal(size=(5, 3))
    out, _ = batchnorm_forward(state, x, EvalMode.EVALUATION)
    np.testing.assert_array_equal(out, x)


def test_batchnorm_constant_batch_returns_beta():
    state = BatchNormState.create(1, eps=1e-5)
    state.beta[...] = 0.7
    out, _ = batchnorm_forward(state, np.full((3, 1), 4.2), EvalMode.TRAINING)
    np.testing.assert_allclose(out, 0.7)


def test_batchnorm_errors():
    state = BatchNormState.create(1)
    with pytest.raises(DegenerateBatchError):
        batchnorm_forward(state, np.array([[1.0]]), EvalMode.TRAINING)
    with pytest.raises(InputError):
        batchnorm_forward(state, np.array([[1.0], [np.nan]]), EvalMode.TRAINING)
    with pytest.raises(InputError):
        BatchNormState(gamma=[1.0], beta=[0.0], eps=1e-5, running_mean=[0.0], running_var=[-1.0], momentum=0.1)
    with pytest.raises(InputError):
        BatchNormState(gamma=[1.0, 1.0], beta=[0.0], eps=1e-5, running_mean=[0.0], running_var=[1.0], momentum=0.1)


def test_eval_mode_parse():
    assert EvalMode.parse('Training') is EvalMode.TRAINING
    assert EvalMode.parse(EvalMode.EVALUATION) is EvalMode.EVALUATION
    with pytest.raises(InputError):
        EvalMode.parse('inference')


# --- прямой и обратный проход --------------------------------------------------

@pytest.mark.parametrize("mode", [EvalMode.TRAINING, EvalMode.EVALUATION])
def test_identity_flow_forward(rng, mode):
    model = build_identity_flow(4)
    x = rng.normal(size=(6, 4))
    z, log_det = flow_forward(model, Batch(x), mode)
    np.testing.assert_array_equal(z, x)
    np.testing.assert_array_equal(log_det, np.zeros(6))


def test_appendix_flow_log_det_is_zero(appendix_p):
    model = build_appendix_flow(gamma=0.8, beta=0.3)
    batch = appendix_p.data[:64]
    for mode in EvalMode:
        _, log_det = flow_forward(model, batch, mode)
        assert np.all(log_det == 0.0)


def test_modes_agree_without_batchnorm(plain_flow, rng):
    x = rng.normal(size=(16, 3))
    ll_train = log_likelihood(plain_flow, x, EvalMode.TRAINING)
    ll_eval = log_likelihood(plain_flow, x, EvalMode.EVALUATION)
    np.testing.assert_allclose(ll_train, ll_eval, rtol=0, atol=1e-12)


def test_single_layer_log_det_equals_sum_of_log_scales(small_flow, rng):
    x = rng.normal(size=(8, 3))
    layer = small_flow.layers[0]
    _, log_det, _, _ = layer.forward_cached(x, EvalMode.TRAINING)
    s_raw = layer.s_net.forward(x[:, layer.mask], EvalMode.TRAINING)
    expected = (layer.scale_cap * np.tanh(s_raw / layer.scale_cap)).sum(axis=-1)
    np.testing.assert_allclose(log_det, expected, rtol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_inverse_round_trip(seed):
    rng = np.random.default_rng(seed)
    model = build_flow(FlowArchitecture(dim=4, n_layers=4, hidden=8), seed=seed)
    for state in model.batchnorm_states:
        state.running_mean = rng.normal(size=state.width)
        state.running_var = rng.uniform(0.5, 2.0, size=state.width)
    x = rng.normal(size=(32, 4))
    z, _ = flow_forward(model, x, EvalMode.EVALUATION)
    np.testing.assert_allclose(flow_inverse(model, z).data, x, rtol=1e-8, atol=1e-10)
    z_back, _ = flow_forward(model, flow_inverse(model, z), EvalMode.EVALUATION)
    np.testing.assert_allclose(z_back, z, rtol=1e-8, atol=1e-10)


def test_identity_inverse(rng):
    model = build_identity_flow(3)
    z = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(flow_inverse(model, z).data, z)
    np.testing.assert_array_equal(flow_inverse(model, np.zeros(3)).data, np.zeros((1, 3)))


def test_inverse_rejects_non_finite(small_flow):
    with pytest.raises(InputError):
        flow_inverse(small_flow, np.array([[0.0, np.inf, 0.0]]))


def test_forward_errors(small_flow, rng):
    with pytest.raises(DimensionMismatchError):
        flow_forward(small_flow, rng.normal(size=(4, 2)), EvalMode.EVALUATION)
    with pytest.raises(DegenerateBatchError):
        flow_forward(small_flow, rng.normal(size=(1, 3)), EvalMode.TRAINING)
    with pytest.raises(InputError):
        Batch(np.array([[0.0, np.nan, 1.0]]))


# --- правдоподобие -------------------------------------------------------------

def test_identity_log_likelihood_at_origin():
    model = build_identity_flow(2)
    ll = log_likelihood(model, np.zeros((1, 2)), EvalMode.EVALUATION)
    assert ll[0] == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert ll[0] == pytest.approx(-1.837877, abs=1e-6)


def test_evaluation_loglik_is_batch_independent(small_flow, rng):
    x = rng.normal(size=(10, 3))
    full = log_likelihood(small_flow, x, EvalMode.EVALUATION)
    extra = np.vstack([x, rng.normal(size=(20, 3))])
    perm = rng.permutation(10)
    np.testing.assert_allclose(log_likelihood(small_flow, extra, EvalMode.EVALUATION)[:10], full, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(log_likelihood(small_flow, x[perm], EvalMode.EVALUATION), full[perm], rtol=1e-10, atol=1e-10)
    single = log_likelihood(small_flow, x[3:4], EvalMode.EVALUATION)
    assert single[0] == pytest.approx(full[3], rel=1e-12)


def test_training_loglik_is_permutation_equivariant(small_flow, rng):
    x = rng.normal(size=(12, 3))
    perm = rng.permutation(12)
    ll = log_likelihood(small_flow, x, EvalMode.TRAINING)
    np.testing.assert_allclose(log_likelihood(small_flow, x[perm], EvalMode.TRAINING), ll[perm], rtol=1e-10, atol=1e-10)


def test_training_loglik_depends_on_batch(small_flow, rng):
    x = rng.normal(size=(8, 3))
    other = np.vstack([x[:1], rng.normal(loc=3.0, size=(7, 3))])
    a = log_likelihood(small_flow, x, EvalMode.TRAINING)[0]
    b = log_likelihood(small_flow, other, EvalMode.TRAINING)[0]
    assert a != b


def test_stacked_batches_match_individual_batches(small_flow, rng):
    stack = rng.normal(size=(3, 6, 3))
    stacked = log_likelihood(small_flow, stack, EvalMode.TRAINING)
    for i in range(3):
        np.testing.assert_allclose(stacked[i], log_likelihood(small_flow, stack[i], EvalMode.TRAINING), rtol=1e-10)


def test_bpd():
    assert bpd(np.array([-3 * math.log(2)]), 3)[0] == pytest.approx(1.0)
    assert bpd(np.array([0.0]), 5)[0] == 0.0
    assert bpd(np.array([-0.918939]), 1)[0] == pytest.approx(1.325748, abs=1e-6)
    with pytest.raises(InputError):
        bpd(np.array([1.0]), 0)


# --- смешанные батчи -----------------------------------------------------------

def test_mixed_conditional_without_batchnorm_equals_evaluation(plain_flow, rng):
    test = rng.normal(size=(3, 3))
    ref = rng.normal(size=(20, 3))
    value = mixed_conditional_loglik(plain_flow, test, ref, 1)
    expected = log_likelihood(plain_flow, test[1:2], EvalMode.EVALUATION)[0]
    assert value == pytest.approx(expected, abs=1e-10)


def test_mixed_conditional_empty_reference_is_training_mode(small_flow, rng):
    test = rng.normal(size=(6, 3))
    expected = log_likelihood(small_flow, test, EvalMode.TRAINING)
    for j in range(6):
        assert mixed_conditional_loglik(small_flow, test, np.empty((0, 3)), j) == expected[j]
    assert mixed_conditional_loglik(small_flow, test, None, 2) == expected[2]


def test_mixed_conditional_errors(small_flow, rng):
    with pytest.raises(InputError):
        mixed_conditional_loglik(small_flow, rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), 2)
    with pytest.raises(DegenerateBatchError):
        mixed_conditional_loglik(small_flow, rng.normal(size=(1, 3)), None, 0)


def test_mixed_conditional_small_ratio_approaches_evaluation(appendix_model, appendix_p, appendix_q):
    ref = appendix_p.data[:512]
    for j in range(16):
        x = appendix_q.data[j:j + 1]
        mixed = mixed_conditional_loglik(appendix_model, x, ref, 0)
        evaluation = log_likelihood(appendix_model, x, EvalMode.EVALUATION)[0]
        assert abs(mixed - evaluation) < 0.1


# --- значения из аналитического примера ---------------------------------------

def test_appendix_golden_values(appendix_model, appendix_p, appendix_q):
    ll_p = log_likelihood(appendix_model, appendix_p.data, EvalMode.EVALUATION).mean()
    ll_q = log_likelihood(appendix_model, appendix_q.data, EvalMode.EVALUATION).mean()
    q_batches = appendix_q.data.reshape(-1, 64, 2)
    ll_q_train = log_likelihood(appendix_model, q_batches, EvalMode.TRAINING).mean()

    assert ll_p == pytest.approx(-2.84, abs=0.15)
    assert ll_q == pytest.approx(-1.92, abs=0.15)
    assert ll_q_train == pytest.approx(-2.38, abs=0.15)
    assert ll_q_train < ll_q


# --- нормировка условной плотности ---------------------------------------------

def _quadrature(model, conditioning, step=0.02, chunk=40000):
    axis = np.arange(-8.0, 8.0 + step / 2, step)
    g1, g2 = np.meshgrid(axis, axis, indexing='ij')
    grid = np.stack([g1.ravel(), g2.ravel()], axis=1)
    total = 0.0
    for start in range(0, grid.shape[0], chunk):
        points = grid[start:start + chunk]
        stack = np.empty((points.shape[0], conditioning.shape[0] + 1, 2))
        stack[:, 0, :] = points
        stack[:, 1:, :] = conditioning
        ll = log_likelihood(model, stack, EvalMode.TRAINING)[:, 0]
        total += np.exp(ll).sum()
    return total * step * step


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_training_conditional_density_integrates_to_one(seed):
    rng = np.random.default_rng(seed)
    model = build_flow(FlowArchitecture(dim=2, n_layers=1, hidden=4, scale_cap=0.5), seed=seed)
    data = Dataset(0.5 * rng.normal(size=(256, 2)))
    model, _ = fit_flow(model, data, TrainConfig(batch_size=16, steps=20, learning_rate=1e-2, seed=seed))
    conditioning = 0.5 * rng.normal(size=(3, 2))
    assert _quadrature(model, conditioning) == pytest.approx(1.0, abs=1e-2)


# --- параметры и сериализация --------------------------------------------------

def test_save_load_is_bit_exact(small_flow, tmp_path, rng):
    for state in small_flow.batchnorm_states:
        state.running_mean = rng.normal(size=state.width) / 3.0
        state.running_var = rng.uniform(0.1, 3.0, size=state.width)
    path = tmp_path / "model.json"
    save_model(small_flow, str(path))
    loaded = load_model(str(path))

    np.testing.assert_array_equal(flatten_parameters(loaded), flatten_parameters(small_flow))
    for a, b in zip(loaded.batchnorm_states, small_flow.batchnorm_states):
        np.testing.assert_array_equal(a.running_mean, b.running_mean)
        np.testing.assert_array_equal(a.running_var, b.running_var)
        assert a.eps == b.eps and a.momentum == b.momentum
    x = rng.normal(size=(5, 3))
    for mode in EvalMode:
        np.testing.assert_array_equal(log_likelihood(loaded, x, mode), log_likelihood(small_flow, x, mode))


def test_appendix_flow_freezes_linear_layers():
    params = model_parameters(build_appendix_flow(pairs=2), trainable_only=True)
    assert sorted(params) == ['layers.0.t_net.0.beta', 'layers.0.t_net.0.gamma']


def test_set_parameters_writes_into_model(small_flow):
    name = 'layers.1.t_net.1.bias'
    set_parameters(small_flow, {name: np.full_like(model_parameters(small_flow)[name], 0.25)})
    assert np.all(model_parameters(small_flow)[name] == 0.25)


def test_build_flow_is_deterministic_and_masks_alternate():
    arch = FlowArchitecture(dim=5, n_layers=3, hidden=6)
    a, b = build_flow(arch, seed=3), build_flow(arch, seed=3)
    np.testing.assert_array_equal(flatten_parameters(a), flatten_parameters(b))
    assert not np.array_equal(flatten_parameters(a), flatten_parameters(build_flow(arch, seed=4)))
    np.testing.assert_array_equal(a.layers[0].mask, alternating_mask(5, 0))
    np.testing.assert_array_equal(a.layers[1].mask, ~a.layers[0].mask)


def test_scaling_flow_scales_latents(rng):
    model = build_scaling_flow(3, log_scale=-math.log(2.0))
    x = rng.normal(size=(4, 3))
    z, log_det = flow_forward(model, x, EvalMode.EVALUATION)
    np.testing.assert_allclose(z, x / 2.0, rtol=1e-12)
    np.testing.assert_allclose(log_det, -3 * math.log(2.0), rtol=1e-12)


def test_affine_flow_matches_diagonal_gaussian(rng):
    shift, log_scale = np.array([0.5, -1.0, 2.0]), np.array([0.3, -0.7, 1.2])
    model = build_affine_flow(shift, log_scale)
    x = rng.normal(size=(6, 3))
    z, log_det = flow_forward(model, x, EvalMode.EVALUATION)
    np.testing.assert_allclose(z, x * np.exp(log_scale) + shift, rtol=1e-12)
    np.testing.assert_allclose(log_det, log_scale.sum(), rtol=1e-12)
    np.testing.assert_allclose(flow_inverse(model, z).data, x, atol=1e-12)


def test_affine_flow_errors():
    with pytest.raises(InputError):
        build_affine_flow(np.zeros(2), np.zeros(3))
    with pytest.raises(InputError):
        build_affine_flow(np.zeros(2), np.array([0.0, np.nan]))
    with pytest.raises(InputError):
        build_affine_flow(np.zeros(2), np.array([0.0, 4.0]), scale_cap=3.0)


def test_forward_with_cache_reports_batch_statistics(small_flow, rng):
    x = rng.normal(size=(9, 3))
    _, _, _, stats = forward_with_cache(small_flow, x, EvalMode.TRAINING)
    assert len(stats) == len(small_flow.batchnorm_states)
    for state, (mean, var) in stats:
        assert mean.shape == (state.width,) and np.all(var >= 0)
