"""
Генераторы синтетических распределений для экспериментов с OoD-детекцией.

Все генераторы - чистые функции спецификации: одна и та же ScenarioSpec
(включая seed) всегда даёт один и тот же набор данных.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from config import CONFIG
from exceptions import ConfigError, InputError
from flow_model import Batch, EvalMode, FlowModel, build_affine_flow, flow_inverse

logger = logging.getLogger(__name__)

SCENARIOS = ('gauss_mixture_1d', 'appendix_2d', 'uniform_q', 'mode_trap', 'flow_temperature')

# Метка по умолчанию: 0 - обучающее распределение, 1 - кандидат в OoD
DEFAULT_LABELS = {
    'gauss_mixture_1d': 0,
    'appendix_2d': 0,
    'uniform_q': 1,
    'mode_trap': 1,
    'flow_temperature': 1,
}


@dataclass
class Dataset:
    """Матрица образцов с происхождением (сценарий и метка)."""

    data: np.ndarray
    label: int = 0
    scenario: str = ''

    def __post_init__(self):
        self.data = np.array(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[:, None]
        if self.data.ndim != 2:
            raise InputError(f"Dataset: ожидается матрица, получена форма {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InputError("Dataset: обнаружены нечисловые значения")
        self.label = int(self.label)
        if self.label not in (0, 1):
            raise InputError(f"Dataset: метка должна быть 0 или 1, получено {self.label}")

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def as_batch(self) -> Batch:
        return Batch(self.data)

    def subset(self, indices) -> 'Dataset':
        return Dataset(self.data[np.asarray(indices)], label=self.label, scenario=self.scenario)

    def relabel(self, label: int) -> 'Dataset':
        return Dataset(self.data, label=label, scenario=self.scenario)

    def __len__(self) -> int:
        return self.n_samples


@dataclass
class ScenarioSpec:
    """
    Спецификация сценария: имя, число образцов, seed и параметры.

    Отсутствующие параметры берутся из CONFIG.SCENARIO_PARAMS.
    """

    name: str
    n: int
    seed: int = 0
    params: Dict[str, Any] = field(default_factory=dict)
    label: Optional[int] = None

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ConfigError(f"Неизвестный сценарий {self.name!r}; доступны: {', '.join(SCENARIOS)}")
        if int(self.n) < 1:
            raise ConfigError(f"Сценарий {self.name}: n должно быть >= 1, получено {self.n}")
        self.n = int(self.n)
        self.validate()

    def resolved_params(self) -> Dict[str, Any]:
        merged = dict(CONFIG.SCENARIO_PARAMS[self.name])
        merged.update({k: v for k, v in self.params.items() if k in merged})
        return merged

    def validate(self) -> None:
        p = self.resolved_params()
        for key in ('sigma', 'slab_std', 'std', 'temperature'):
            if key in p and not float(p[key]) > 0:
                raise ConfigError(f"Сценарий {self.name}: {key} должен быть положительным, получено {p[key]}")
        if 'a' in p and not float(p['a']) < float(p['b']):
            raise ConfigError(f"Сценарий {self.name}: требуется a < b, получено a={p['a']}, b={p['b']}")
        if 'pairs' in p and int(p['pairs']) < 1:
            raise ConfigError(f"Сценарий {self.name}: pairs должно быть >= 1")
        if 'layout' in p and p['layout'] not in ('pairs', 'line'):
            raise ConfigError(f"Сценарий {self.name}: layout должен быть pairs или line")
        if 'plus_weight' in p and not 0.0 <= float(p['plus_weight']) <= 1.0:
            raise ConfigError(f"Сценарий {self.name}: plus_weight должен лежать в [0, 1], получено {p['plus_weight']}")

    @property
    def resolved_label(self) -> int:
        return DEFAULT_LABELS[self.name] if self.label is None else int(self.label)


def _interleave(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """x1 на чётных позициях, x2 на нечётных."""
    n, pairs = first.shape
    out = np.empty((n, 2 * pairs))
    out[:, 0::2] = first
    out[:, 1::2] = second
    return out


def _mixture(rng: np.random.Generator, shape: Tuple[int, ...], sigma: float, plus_weight: float) -> np.ndarray:
    centers = rng.choice(np.array([-1.0, 1.0]), size=shape, p=[1.0 - plus_weight, plus_weight])
    return centers + rng.normal(0.0, sigma, size=shape)


def sample(spec: ScenarioSpec, model: Optional[FlowModel] = None) -> Dataset:
    """
    Генерирует набор данных по спецификации.

    Сценарии:
        gauss_mixture_1d: смесь N(-1, sigma^2) и N(+1, sigma^2), вес моды +1 равен plus_weight
        appendix_2d: пары (смесь, узкий слой N(0, slab_std^2)); plus_weight=1 оставляет одну моду
        uniform_q: пары (Uniform(a, b), узкий слой)
        mode_trap: N(0, std^2) в седловине между модами; layout=line даёт одномерные данные
        flow_temperature: сэмплы модели при температуре T (нужна model)

    Raises:
        ConfigError: Некорректные параметры или отсутствует модель для flow_temperature
    """
    p = spec.resolved_params()
    rng = np.random.default_rng(spec.seed)
    n = spec.n

    if spec.name == 'gauss_mixture_1d':
        data = _mixture(rng, (n, 1), float(p['sigma']), float(p['plus_weight']))
    elif spec.name == 'appendix_2d':
        pairs = int(p['pairs'])
        x1 = _mixture(rng, (n, pairs), float(p['sigma']), float(p['plus_weight']))
        data = _interleave(x1, rng.normal(0.0, float(p['slab_std']), size=(n, pairs)))
    elif spec.name == 'uniform_q':
        pairs = int(p['pairs'])
        x1 = rng.uniform(float(p['a']), float(p['b']), size=(n, pairs))
        data = _interleave(x1, rng.normal(0.0, float(p['slab_std']), size=(n, pairs)))
    elif spec.name == 'mode_trap':
        if p['layout'] == 'line':
            data = rng.normal(0.0, float(p['std']), size=(n, 1))
        else:
            pairs = int(p['pairs'])
            x1 = rng.normal(0.0, float(p['std']), size=(n, pairs))
            data = _interleave(x1, rng.normal(0.0, float(p['slab_std']), size=(n, pairs)))
    else:
        if model is None:
            raise ConfigError("Сценарий flow_temperature требует обученную модель")
        return sample_temperature(model, n, float(p['temperature']), spec.seed, label=spec.resolved_label)

    logger.debug(f"Сценарий {spec.name}: сгенерировано {n} образцов размерности {data.shape[1]}")
    return Dataset(data, label=spec.resolved_label, scenario=spec.name)


def sample_temperature(model: FlowModel, n: int, T: float, seed: int, label: int = 1) -> Dataset:
    """
    Сэмплирование с температурой: x = f^{-1}(T * z), z ~ N(0, I).

    Args:
        model: Поток (обращение выполняется в evaluation mode)
        n: Число образцов
        T: Температура, T > 0
        seed: Seed генератора латентов

    Raises:
        ConfigError: T <= 0 или n < 1
        InputError: Обратное преобразование дало нечисловые значения
    """
    if not T > 0:
        raise ConfigError(f"Температура должна быть положительной, получено {T}")
    if n < 1:
        raise ConfigError(f"Число образцов должно быть >= 1, получено {n}")
    z = np.random.default_rng(seed).standard_normal((n, model.dim))
    x = flow_inverse(model, T * z).data
    return Dataset(x, label=label, scenario='flow_temperature')


class GaussianFit:
    """
    Диагональная гауссиана, подобранная по максимуму правдоподобия.

    Модель, покрывающая обе моды смеси, присваивает наибольшую плотность
    точке между ними, где данных почти нет.
    """

    def __init__(self, mean: np.ndarray, var: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(-1)
        self.var = np.asarray(var, dtype=np.float64).reshape(-1)
        if np.any(self.var <= 0):
            raise InputError("GaussianFit: дисперсия должна быть положительной")

    @classmethod
    def fit(cls, dataset: Dataset) -> 'GaussianFit':
        data = dataset.data
        # оценка максимального правдоподобия: смещённая дисперсия
        return cls(data.mean(axis=0), data.var(axis=0))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def log_likelihood(self, x, mode: EvalMode = EvalMode.EVALUATION) -> np.ndarray:
        x = np.asarray(getattr(x, 'data', x), dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise InputError(f"GaussianFit: размерность {x.shape[-1]} вместо {self.dim}")
        return -0.5 * np.sum((x - self.mean) ** 2 / self.var + np.log(2.0 * math.pi * self.var), axis=-1)

    def to_flow(self) -> FlowModel:
        """
        Та же гауссиана в виде потока z = (x - mean) / std без BatchNorm:
        правдоподобие совпадает, а sample_temperature даёт mean + T * std * z.
        """
        std = np.sqrt(self.var)
        return build_affine_flow(-self.mean / std, -np.log(std))


def train_holdout_split(dataset: Dataset, holdout_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Случайно делит набор на обучающую и отложенную части."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError(f"holdout_fraction должен лежать в (0, 1), получено {holdout_fraction}")
    n_holdout = max(1, int(round(dataset.n_samples * holdout_fraction)))
    if n_holdout >= dataset.n_samples:
        raise ConfigError("Слишком мало образцов для разбиения на обучающую и отложенную части")
    order = np.random.default_rng(seed).permutation(dataset.n_samples)
    return dataset.subset(np.sort(order[n_holdout:])), dataset.subset(np.sort(order[:n_holdout]))
