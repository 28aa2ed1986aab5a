"""
Обучение потоков методом максимального правдоподобия в training mode.

Градиенты считаются точно (включая производные по статистикам батча),
оптимизатор - Adam, running-статистики BatchNorm обновляются
экспоненциальным скользящим средним на каждом шаге.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import CONFIG, worker_threads
from exceptions import DataError, DivergenceError, InputError
from flow_model import (
    EvalMode,
    FlowArchitecture,
    FlowModel,
    bpd,
    build_flow,
    flow_backward,
    forward_with_cache,
    log_likelihood,
    model_parameters,
    prior_log_density,
)
from synthetic_data import Dataset

logger = logging.getLogger(__name__)

LOG_COLUMNS = ['step', 'train_loss_nats', 'eval_bpd_holdout']


@dataclass
class TrainConfig:
    """Параметры обучения; значения по умолчанию берутся из CONFIG.TRAIN_PARAMS."""

    batch_size: int = CONFIG.TRAIN_PARAMS['batch_size']
    steps: int = CONFIG.TRAIN_PARAMS['steps']
    learning_rate: float = CONFIG.TRAIN_PARAMS['learning_rate']
    adam_beta1: float = CONFIG.TRAIN_PARAMS['adam_beta1']
    adam_beta2: float = CONFIG.TRAIN_PARAMS['adam_beta2']
    adam_eps: float = CONFIG.TRAIN_PARAMS['adam_eps']
    bn_momentum: float = CONFIG.TRAIN_PARAMS['bn_momentum']
    seed: int = 0
    eval_every: int = CONFIG.TRAIN_PARAMS['eval_every']
    log_every: int = CONFIG.TRAIN_PARAMS['log_every']

    def __post_init__(self):
        if self.batch_size < 2:
            raise InputError(f"batch_size должен быть >= 2, получено {self.batch_size}")
        if self.steps < 0:
            raise InputError(f"steps должен быть неотрицательным, получено {self.steps}")
        if not self.learning_rate > 0:
            raise InputError(f"learning_rate должен быть положительным, получено {self.learning_rate}")
        if not 0.0 < self.bn_momentum < 1.0:
            raise InputError(f"bn_momentum должен лежать в (0, 1), получено {self.bn_momentum}")
        if self.eval_every < 1 or self.log_every < 1:
            raise InputError("eval_every и log_every должны быть >= 1")


@dataclass
class EnsembleSpec:
    """k независимо обученных моделей с seed = base_seed + i."""

    k: int = CONFIG.ENSEMBLE_PARAMS['k']
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    architecture: Optional[FlowArchitecture] = None

    def __post_init__(self):
        if self.k < 1:
            raise InputError(f"Размер ансамбля k должен быть >= 1, получено {self.k}")


class Adam:
    """
    Adam над именованными массивами параметров; обновляет их на месте.

    Моменты хранятся по имени параметра, поэтому набор обучаемых параметров
    должен быть одинаковым на всех шагах.
    """

    def __init__(self, learning_rate: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, value in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(value)
                self.v[name] = np.zeros_like(value)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g ** 2
            value -= self.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def _batch_array(batch) -> np.ndarray:
    if isinstance(batch, Dataset):
        return batch.data
    return np.asarray(getattr(batch, 'data', batch), dtype=np.float64)


def _loss_and_grad_cached(model: FlowModel, x: np.ndarray):
    z, log_det, caches, stats = forward_with_cache(model, x, EvalMode.TRAINING)
    n = x.shape[0]
    loss = -float(np.mean(prior_log_density(z) + log_det))
    # d(-mean(log N(z) + log_det)) / dz = z / n, по log_det = -1 / n
    grads = flow_backward(model, caches, z / n, np.full(n, -1.0 / n))
    return loss, grads, stats


def loss_and_grad(model: FlowModel, batch) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Функция потерь (минус среднее правдоподобие в training mode) и её
    градиент по всем параметрам модели.

    Args:
        model: Поток
        batch: Батч минимум из 2 строк

    Returns:
        Значение потерь в натах и словарь градиентов с ключами model_parameters

    Raises:
        DivergenceError: Потери не конечны
    """
    x = _batch_array(batch)
    loss, grads, _ = _loss_and_grad_cached(model, x)
    if not math.isfinite(loss):
        raise DivergenceError("Функция потерь не конечна")
    return loss, grads


def _mean_bpd(model: FlowModel, data: np.ndarray) -> float:
    return float(np.mean(bpd(log_likelihood(model, data, EvalMode.EVALUATION), model.dim)))


def fit_flow(
    model: FlowModel,
    dataset: Dataset,
    cfg: TrainConfig,
    holdout: Optional[Dataset] = None,
) -> Tuple[FlowModel, pd.DataFrame]:
    """
    Обучает копию модели и возвращает её вместе с журналом обучения.

    Журнал содержит по строке на шаг: step, train_loss_nats, eval_bpd_holdout
    (средний BPD на отложенной выборке в evaluation mode раз в eval_every
    шагов и на последнем шаге, иначе NaN).

    Raises:
        DataError: Данных меньше, чем batch_size
        DivergenceError: Потери перестали быть конечными (с номером шага и seed)
    """
    data = dataset.data
    if data.shape[0] < cfg.batch_size:
        raise DataError(f"Для обучения нужно минимум {cfg.batch_size} образцов, получено {data.shape[0]}")

    trained = model.copy()
    for state in trained.batchnorm_states:
        state.momentum = cfg.bn_momentum
    params = model_parameters(trained, trainable_only=True)
    optimizer = Adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)

    rows = []
    order = rng.permutation(data.shape[0])
    cursor = 0
    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > order.shape[0]:
            order = rng.permutation(data.shape[0])
            cursor = 0
        batch = data[order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size

        loss, grads, stats = _loss_and_grad_cached(trained, batch)
        if not math.isfinite(loss):
            raise DivergenceError("Функция потерь не конечна", step=step, seed=cfg.seed)

        optimizer.step(params, grads)
        for state, (batch_mean, batch_var) in stats:
            state.update_running(batch_mean, batch_var)

        eval_bpd = float('nan')
        if holdout is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
            eval_bpd = _mean_bpd(trained, holdout.data)
        rows.append((step, loss, eval_bpd))

        if step % cfg.log_every == 0:
            logger.info(f"Шаг обучения {step}/{cfg.steps}: loss={loss:.4f} нат")

    log_frame = pd.DataFrame(rows, columns=LOG_COLUMNS)
    return trained, log_frame


def train_mle(model: FlowModel, dataset: Dataset, cfg: TrainConfig) -> FlowModel:
    """Обучает модель и возвращает обученную копию (исходная модель не меняется)."""
    trained, _ = fit_flow(model, dataset, cfg)
    return trained


def train_ensemble(
    spec: EnsembleSpec,
    dataset: Dataset,
    architecture: Optional[FlowArchitecture] = None,
) -> List[FlowModel]:
    """
    Обучает k моделей с seed base_seed, ..., base_seed + k - 1.

    Участники не разделяют состояния и обучаются параллельно в пуле потоков
    размера OODNORM_THREADS; результат от числа потоков не зависит.
    """
    arch = architecture or spec.architecture or FlowArchitecture(dim=dataset.dim)

    def train_member(index: int) -> FlowModel:
        seed = spec.base_seed + index
        cfg = replace(spec.train, seed=seed)
        try:
            return train_mle(build_flow(arch, seed), dataset, cfg)
        except DivergenceError as e:
            raise DivergenceError(f"Расходимость участника ансамбля {index}", step=e.step, seed=seed) from e

    threads = min(worker_threads(), spec.k)
    logger.info(f"Обучение ансамбля: k={spec.k}, потоков={threads}")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(train_member, range(spec.k)))


def calibrate_running_stats(model: FlowModel, dataset: Dataset, batch_size: int, seed: int = 0) -> FlowModel:
    """
    Пересчитывает running-статистики как среднее статистик батчей за один
    проход по данным. Параметры модели не меняются.
    """
    data = dataset.data
    if data.shape[0] < batch_size:
        raise DataError(f"Для калибровки нужно минимум {batch_size} образцов")

    calibrated = model.copy()
    order = np.random.default_rng(seed).permutation(data.shape[0])
    sums: Dict[int, List[np.ndarray]] = {}
    n_batches = data.shape[0] // batch_size
    for i in range(n_batches):
        batch = data[order[i * batch_size:(i + 1) * batch_size]]
        _, _, _, stats = forward_with_cache(calibrated, batch, EvalMode.TRAINING)
        for state, (batch_mean, batch_var) in stats:
            acc = sums.setdefault(id(state), [np.zeros_like(batch_mean), np.zeros_like(batch_var)])
            acc[0] += batch_mean
            acc[1] += batch_var

    for state in calibrated.batchnorm_states:
        if id(state) in sums:
            state.running_mean = sums[id(state)][0] / n_batches
            state.running_var = sums[id(state)][1] / n_batches
    logger.debug(f"Running-статистики откалиброваны по {n_batches} батчам")
    return calibrated
