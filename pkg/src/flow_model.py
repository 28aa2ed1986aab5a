"""
Ядро нормализующего потока для экспериментов с OoD-детекцией.
Аффинные coupling-слои с BatchNorm внутри сетей s(·) и t(·), точное
правдоподобие через замену переменных и два режима чтения статистик
BatchNorm: training mode (статистики текущего батча) и evaluation mode
(накопленные running-статистики).

Все операции принимают как один батч формы (b, dim), так и стопку батчей
формы (..., b, dim): статистики батча всегда считаются по оси -2.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from exceptions import DegenerateBatchError, DimensionMismatchError, InputError

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
MODEL_FORMAT = "oodnorm-flow"
MODEL_FORMAT_VERSION = 1
ACTIVATIONS = ("tanh", "identity")


class EvalMode(Enum):
    """Режим чтения статистик BatchNorm."""

    TRAINING = "training"
    EVALUATION = "evaluation"

    @classmethod
    def parse(cls, value: Union[str, "EvalMode"]) -> "EvalMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InputError(f"Неизвестный режим BatchNorm: {value!r}") from None


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise InputError(f"{what}: обнаружены нечисловые значения (NaN/inf)")


def _sum_to_features(arr: np.ndarray) -> np.ndarray:
    """Суммирует по всем осям, кроме последней (батч и стопка батчей)."""
    return arr.reshape(-1, arr.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# BatchNorm
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """
    Параметры и накопленные статистики одного слоя BatchNorm.

    gamma, beta обучаются; running_mean, running_var обновляются
    экспоненциальным скользящим средним с коэффициентом momentum.
    """

    gamma: np.ndarray
    beta: np.ndarray
    eps: float
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float

    def __post_init__(self):
        self.gamma = np.array(self.gamma, dtype=np.float64).reshape(-1)
        self.beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        self.running_mean = np.array(self.running_mean, dtype=np.float64).reshape(-1)
        self.running_var = np.array(self.running_var, dtype=np.float64).reshape(-1)
        self.eps = float(self.eps)
        self.momentum = float(self.momentum)

        width = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape[0] != width:
                raise InputError(f"BatchNorm: длина {name} не совпадает с длиной gamma ({width})")
        # eps = 0 допускается только для аналитических проверок
        if self.eps < 0:
            raise InputError(f"BatchNorm: eps должен быть неотрицательным, получено {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise InputError(f"BatchNorm: momentum должен лежать в (0, 1), получено {self.momentum}")
        if np.any(self.running_var < 0):
            raise InputError("BatchNorm: running_var содержит отрицательные значения")

    @classmethod
    def create(cls, width: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        """Начальное состояние: gamma=1, beta=0, running-статистики (0, 1)."""
        return cls(
            gamma=np.ones(width),
            beta=np.zeros(width),
            eps=eps,
            running_mean=np.zeros(width),
            running_var=np.ones(width),
            momentum=momentum,
        )

    @property
    def width(self) -> int:
        return int(self.gamma.shape[0])

    def update_running(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        """running <- (1 - m) * running + m * batch_stat."""
        m = self.momentum
        self.running_mean = (1.0 - m) * self.running_mean + m * np.asarray(batch_mean, dtype=np.float64)
        self.running_var = (1.0 - m) * self.running_var + m * np.asarray(batch_var, dtype=np.float64)


def _batchnorm_forward_cached(state: BatchNormState, x: np.ndarray, mode: EvalMode):
    if x.shape[-1] != state.width:
        raise DimensionMismatchError(
            f"BatchNorm: ширина входа {x.shape[-1]} не совпадает с шириной слоя {state.width}"
        )

    if mode is EvalMode.TRAINING:
        b = x.shape[-2]
        if b < 2:
            raise DegenerateBatchError("Training mode требует батч минимум из 2 строк")
        mu = x.mean(axis=-2, keepdims=True)
        centered = x - mu
        # несмещённая оценка 1/(b-1), как в формуле для доказательства нормировки
        var = (centered ** 2).sum(axis=-2, keepdims=True) / (b - 1)
        stats = (np.squeeze(mu, axis=-2), np.squeeze(var, axis=-2))
    else:
        mu = state.running_mean
        centered = x - mu
        var = state.running_var
        stats = (mu.copy(), var.copy())

    denom = var + state.eps
    if np.any(denom <= 0):
        raise InputError("BatchNorm: нулевая дисперсия при eps = 0")
    inv_std = 1.0 / np.sqrt(denom)
    x_hat = centered * inv_std
    out = x_hat * state.gamma + state.beta
    return out, (mode, x_hat, inv_std, state.gamma), stats


def _batchnorm_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mode, x_hat, inv_std, gamma = cache
    dgamma = _sum_to_features(dout * x_hat)
    dbeta = _sum_to_features(dout)
    dx_hat = dout * gamma

    if mode is EvalMode.TRAINING:
        b = x_hat.shape[-2]
        mean_term = dx_hat.sum(axis=-2, keepdims=True) / b
        var_term = (dx_hat * x_hat).sum(axis=-2, keepdims=True) / (b - 1)
        dx = inv_std * (dx_hat - mean_term - x_hat * var_term)
    else:
        dx = dx_hat * inv_std
    return dx, dgamma, dbeta


def batchnorm_forward(
    state: BatchNormState, batch_column: np.ndarray, mode: EvalMode
) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """
    Применяет BatchNorm к матрице признаков.

    Args:
        state: Параметры и running-статистики слоя
        batch_column: Матрица (b, width) или стопка (..., b, width)
        mode: Режим чтения статистик

    Returns:
        Нормализованная матрица и пара (mu, var), реально использованная
        при нормализации (в training mode - статистики батча)

    Raises:
        DegenerateBatchError: Training mode с батчем из одной строки
        InputError: Нечисловые значения на входе
    """
    x = np.asarray(batch_column, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    _check_finite(x, "BatchNorm")
    out, _, stats = _batchnorm_forward_cached(state, x, EvalMode.parse(mode))
    return out, stats


# ---------------------------------------------------------------------------
# MLP для s(·) и t(·)
# ---------------------------------------------------------------------------

@dataclass
class DenseLayer:
    """Линейный слой, опциональный BatchNorm перед активацией и активация."""

    weight: np.ndarray
    bias: np.ndarray
    batchnorm: Optional[BatchNormState] = None
    activation: str = "identity"
    trainable: bool = True

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2 or self.weight.shape[1] != self.bias.shape[0]:
            raise InputError(
                f"DenseLayer: несогласованные формы weight {self.weight.shape} и bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise InputError(f"DenseLayer: неизвестная активация {self.activation!r}")
        if self.batchnorm is not None and self.batchnorm.width != self.weight.shape[1]:
            raise InputError("DenseLayer: ширина BatchNorm не совпадает с выходом слоя")


@dataclass
class Mlp:
    """Последовательность DenseLayer; последний слой линейный и без BatchNorm."""

    layers: List[DenseLayer]

    def __post_init__(self):
        if not self.layers:
            raise InputError("Mlp: нужен хотя бы один слой")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise InputError("Mlp: формы соседних слоёв не согласованы")
        last = self.layers[-1]
        if last.activation != "identity" or last.batchnorm is not None:
            raise InputError("Mlp: последний слой должен быть линейным и без BatchNorm")

    @property
    def in_features(self) -> int:
        return int(self.layers[0].weight.shape[0])

    @property
    def out_features(self) -> int:
        return int(self.layers[-1].weight.shape[1])

    def forward_cached(self, x: np.ndarray, mode: EvalMode):
        caches = []
        stats = []
        h = x
        for layer in self.layers:
            h_in = h
            a = h_in @ layer.weight + layer.bias
            bn_cache = None
            if layer.batchnorm is not None:
                a, bn_cache, bn_stats = _batchnorm_forward_cached(layer.batchnorm, a, mode)
                stats.append((layer.batchnorm, bn_stats))
            h = np.tanh(a) if layer.activation == "tanh" else a
            caches.append((h_in, bn_cache, h))
        return h, caches, stats

    def forward(self, x: np.ndarray, mode: EvalMode) -> np.ndarray:
        return self.forward_cached(x, mode)[0]

    def backward(self, dout: np.ndarray, caches) -> Tuple[np.ndarray, List[Dict[str, np.ndarray]]]:
        grads: List[Dict[str, np.ndarray]] = [dict() for _ in self.layers]
        dh = dout
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            h_in, bn_cache, h_out = caches[idx]
            da = dh * (1.0 - h_out ** 2) if layer.activation == "tanh" else dh
            if bn_cache is not None:
                da, dgamma, dbeta = _batchnorm_backward(da, bn_cache)
                grads[idx]["gamma"] = dgamma
                grads[idx]["beta"] = dbeta
            n_in, n_out = layer.weight.shape
            grads[idx]["weight"] = h_in.reshape(-1, n_in).T @ da.reshape(-1, n_out)
            grads[idx]["bias"] = _sum_to_features(da)
            dh = da @ layer.weight.T
        return dh, grads


# ---------------------------------------------------------------------------
# Coupling-слой и поток
# ---------------------------------------------------------------------------

@dataclass
class CouplingLayer:
    """
    Аффинный coupling-слой: x' = x, y' = s(x) * y + t(x).

    mask выбирает координаты, проходящие без изменений (True); остальные
    преобразуются. log s ограничен: log s = scale_cap * tanh(s_net(x) / scale_cap).
    """

    mask: np.ndarray
    s_net: Mlp
    t_net: Mlp
    scale_cap: float = 3.0

    def __post_init__(self):
        self.mask = np.array(self.mask, dtype=bool).reshape(-1)
        n_pass = int(self.mask.sum())
        n_trans = int(self.mask.shape[0] - n_pass)
        if n_pass == 0 or n_trans == 0:
            raise InputError("CouplingLayer: маска должна содержать и True, и False")
        for name, net in (("s_net", self.s_net), ("t_net", self.t_net)):
            if net.in_features != n_pass or net.out_features != n_trans:
                raise InputError(
                    f"CouplingLayer: {name} должна отображать {n_pass} -> {n_trans}, "
                    f"получено {net.in_features} -> {net.out_features}"
                )
        if self.scale_cap <= 0:
            raise InputError("CouplingLayer: scale_cap должен быть положительным")
        self.scale_cap = float(self.scale_cap)

    def _scale_and_shift(self, x_pass: np.ndarray, mode: EvalMode):
        s_raw, s_cache, s_stats = self.s_net.forward_cached(x_pass, mode)
        shift, t_cache, t_stats = self.t_net.forward_cached(x_pass, mode)
        squashed = np.tanh(s_raw / self.scale_cap)
        log_s = self.scale_cap * squashed
        return log_s, shift, squashed, (s_cache, t_cache), s_stats + t_stats

    def forward_cached(self, x: np.ndarray, mode: EvalMode):
        x_pass = x[..., self.mask]
        x_trans = x[..., ~self.mask]
        log_s, shift, squashed, net_caches, stats = self._scale_and_shift(x_pass, mode)
        scale = np.exp(log_s)
        y = x.copy()
        y[..., ~self.mask] = x_trans * scale + shift
        log_det = log_s.sum(axis=-1)
        return y, log_det, (x_trans, squashed, scale, net_caches), stats

    def backward(self, dy: np.ndarray, dlog_det: np.ndarray, cache):
        x_trans, squashed, scale, (s_cache, t_cache) = cache
        dy_trans = dy[..., ~self.mask]

        dlog_s = dy_trans * x_trans * scale + dlog_det[..., None]
        ds_raw = dlog_s * (1.0 - squashed ** 2)
        dx_pass_s, s_grads = self.s_net.backward(ds_raw, s_cache)
        dx_pass_t, t_grads = self.t_net.backward(dy_trans, t_cache)

        dx = np.empty_like(dy)
        dx[..., ~self.mask] = dy_trans * scale
        dx[..., self.mask] = dy[..., self.mask] + dx_pass_s + dx_pass_t
        return dx, {"s_net": s_grads, "t_net": t_grads}

    def inverse(self, y: np.ndarray) -> np.ndarray:
        y_pass = y[..., self.mask]
        log_s, shift, _, _, _ = self._scale_and_shift(y_pass, EvalMode.EVALUATION)
        x = y.copy()
        x[..., ~self.mask] = (y[..., ~self.mask] - shift) * np.exp(-log_s)
        return x


@dataclass
class FlowModel:
    """Упорядоченный стек coupling-слоёв со стандартным нормальным prior."""

    layers: List[CouplingLayer]
    dim: int

    def __post_init__(self):
        self.dim = int(self.dim)
        if self.dim < 2:
            raise InputError("FlowModel: coupling-слоям нужна размерность не меньше 2")
        if not self.layers:
            raise InputError("FlowModel: нужен хотя бы один coupling-слой")
        for idx, layer in enumerate(self.layers):
            if layer.mask.shape[0] != self.dim:
                raise InputError(f"FlowModel: маска слоя {idx} имеет длину {layer.mask.shape[0]}, ожидалось {self.dim}")

    @property
    def batchnorm_states(self) -> List[BatchNormState]:
        states = []
        for layer in self.layers:
            for net in (layer.s_net, layer.t_net):
                states.extend(d.batchnorm for d in net.layers if d.batchnorm is not None)
        return states

    @property
    def has_batchnorm(self) -> bool:
        return bool(self.batchnorm_states)

    def log_likelihood(self, x, mode: EvalMode = EvalMode.EVALUATION) -> np.ndarray:
        return log_likelihood(self, x, mode)

    def copy(self) -> "FlowModel":
        return copy.deepcopy(self)


@dataclass
class Batch:
    """Плотная матрица образцов: строки - образцы, столбцы - координаты."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.array(self.data, dtype=np.float64)
        if self.data.ndim == 1:
            self.data = self.data[None, :]
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise InputError(f"Batch: ожидается матрица (n >= 1, dim), получена форма {self.data.shape}")
        _check_finite(self.data, "Batch")

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])


def _as_input(model: FlowModel, batch, mode: EvalMode) -> np.ndarray:
    x = batch.data if isinstance(batch, Batch) else np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != model.dim:
        raise DimensionMismatchError(f"Размерность данных {x.shape[-1]} не совпадает с размерностью модели {model.dim}")
    if x.shape[-2] < 1:
        raise InputError("Пустой батч")
    if mode is EvalMode.TRAINING and x.shape[-2] < 2:
        raise DegenerateBatchError("Training mode требует батч минимум из 2 строк")
    _check_finite(x, "Входной батч")
    return x


def forward_with_cache(model: FlowModel, x: np.ndarray, mode: EvalMode):
    """
    Прямой проход с сохранением промежуточных значений для backward.

    Returns:
        latents, log_det, caches, stats - stats содержит пары
        (BatchNormState, (mu, var)) для обновления running-статистик
    """
    mode = EvalMode.parse(mode)
    x = _as_input(model, x, mode)
    z = x
    log_det = np.zeros(x.shape[:-1])
    caches = []
    stats = []
    for layer in model.layers:
        z, layer_log_det, cache, layer_stats = layer.forward_cached(z, mode)
        log_det = log_det + layer_log_det
        caches.append(cache)
        stats.extend(layer_stats)
    return z, log_det, caches, stats


def flow_backward(model: FlowModel, caches, dz: np.ndarray, dlog_det: np.ndarray) -> Dict[str, np.ndarray]:
    """Градиенты по всем параметрам модели; ключи совпадают с model_parameters."""
    grads: Dict[str, np.ndarray] = {}
    dx = dz
    for idx in range(len(model.layers) - 1, -1, -1):
        dx, layer_grads = model.layers[idx].backward(dx, dlog_det, caches[idx])
        for net_name, net_grads in layer_grads.items():
            for k, g in enumerate(net_grads):
                for param, value in g.items():
                    grads[f"layers.{idx}.{net_name}.{k}.{param}"] = value
    return grads


def flow_forward(model: FlowModel, batch, mode: EvalMode) -> Tuple[np.ndarray, np.ndarray]:
    """
    Прямое преобразование x -> z.

    Returns:
        Латентные переменные той же формы и log|det J| для каждого образца
    """
    z, log_det, _, _ = forward_with_cache(model, batch, mode)
    return z, log_det


def flow_inverse(model: FlowModel, latents) -> Batch:
    """Обратное преобразование z -> x; определено только в evaluation mode."""
    z = np.asarray(latents.data if isinstance(latents, Batch) else latents, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    if z.shape[-1] != model.dim:
        raise DimensionMismatchError(f"Размерность латентов {z.shape[-1]} не совпадает с размерностью модели {model.dim}")
    _check_finite(z, "Латентные переменные")
    x = z
    for layer in reversed(model.layers):
        x = layer.inverse(x)
    _check_finite(x, "Результат обратного преобразования")
    return Batch(x)


def prior_log_density(z: np.ndarray) -> np.ndarray:
    """log N(z; 0, I) по последней оси."""
    return -0.5 * np.sum(z ** 2, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def log_likelihood(model: FlowModel, batch, mode: EvalMode) -> np.ndarray:
    """Логарифм правдоподобия в натах для каждого образца: log N(f(x)) + log|det J|."""
    z, log_det = flow_forward(model, batch, mode)
    return prior_log_density(z) + log_det


def bpd(loglik_nats, dim: int) -> np.ndarray:
    """Bits per dimension: -loglik / (dim * ln 2)."""
    if int(dim) < 1:
        raise InputError(f"bpd: размерность должна быть >= 1, получено {dim}")
    return -np.asarray(loglik_nats, dtype=np.float64) / (int(dim) * math.log(2.0))


def mixed_conditional_loglik(model: FlowModel, test_batch, ref_batch, j: int) -> float:
    """
    Условное правдоподобие j-го тестового образца в смешанном батче.

    Тестовые и опорные образцы объединяются в один батч и оцениваются в
    training mode; возвращается j-я строка. Пустой ref_batch соответствует
    батчу из одних тестовых образцов.
    """
    test = np.asarray(test_batch.data if isinstance(test_batch, Batch) else test_batch, dtype=np.float64)
    if test.ndim == 1:
        test = test[None, :]
    if ref_batch is None:
        ref = np.empty((0, test.shape[-1]))
    else:
        ref = np.asarray(ref_batch.data if isinstance(ref_batch, Batch) else ref_batch, dtype=np.float64)
        if ref.size == 0:
            ref = np.empty((0, test.shape[-1]))
        elif ref.ndim == 1:
            ref = ref[None, :]

    combined = np.concatenate([test, ref], axis=0)
    if combined.shape[0] == 0:
        raise InputError("Пустой смешанный батч")
    if not 0 <= j < test.shape[0]:
        raise InputError(f"Индекс {j} вне диапазона тестового батча из {test.shape[0]} строк")
    return float(log_likelihood(model, combined, EvalMode.TRAINING)[j])


# ---------------------------------------------------------------------------
# Параметры
# ---------------------------------------------------------------------------

def _iter_parameter_slots(model: FlowModel) -> Iterator[Tuple[str, Any, str, bool]]:
    for idx, layer in enumerate(model.layers):
        for net_name in ("s_net", "t_net"):
            net = getattr(layer, net_name)
            for k, dense in enumerate(net.layers):
                prefix = f"layers.{idx}.{net_name}.{k}"
                yield f"{prefix}.weight", dense, "weight", dense.trainable
                yield f"{prefix}.bias", dense, "bias", dense.trainable
                if dense.batchnorm is not None:
                    yield f"{prefix}.gamma", dense.batchnorm, "gamma", True
                    yield f"{prefix}.beta", dense.batchnorm, "beta", True


def model_parameters(model: FlowModel, trainable_only: bool = False) -> Dict[str, np.ndarray]:
    """Именованные ссылки на массивы параметров (изменение массива меняет модель)."""
    return {
        name: getattr(holder, attr)
        for name, holder, attr, trainable in _iter_parameter_slots(model)
        if trainable or not trainable_only
    }


def set_parameters(model: FlowModel, params: Dict[str, np.ndarray]) -> None:
    for name, holder, attr, _ in _iter_parameter_slots(model):
        if name in params:
            current = getattr(holder, attr)
            current[...] = np.asarray(params[name], dtype=np.float64).reshape(current.shape)


def flatten_parameters(model: FlowModel) -> np.ndarray:
    return np.concatenate([p.reshape(-1) for p in model_parameters(model).values()])


# ---------------------------------------------------------------------------
# Построение моделей
# ---------------------------------------------------------------------------

@dataclass
class FlowArchitecture:
    """Архитектура потока для build_flow."""

    dim: int
    n_layers: int = 4
    hidden: int = 16
    n_hidden: int = 1
    batchnorm: bool = True
    scale_cap: float = 3.0
    eps: float = 1e-5
    momentum: float = 0.1


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    """Чётные (parity=0) или нечётные (parity=1) координаты проходят без изменений."""
    mask = np.zeros(dim, dtype=bool)
    mask[parity % 2::2] = True
    return mask


def _uniform_dense(rng: np.random.Generator, n_in: int, n_out: int, **kwargs) -> DenseLayer:
    bound = 1.0 / math.sqrt(n_in)
    return DenseLayer(
        weight=rng.uniform(-bound, bound, size=(n_in, n_out)),
        bias=np.zeros(n_out),
        **kwargs,
    )


def build_mlp(
    n_in: int,
    n_out: int,
    hidden: int,
    n_hidden: int,
    batchnorm: bool,
    rng: np.random.Generator,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Mlp:
    layers = []
    width = n_in
    for _ in range(n_hidden):
        bn = BatchNormState.create(hidden, eps=eps, momentum=momentum) if batchnorm else None
        layers.append(_uniform_dense(rng, width, hidden, batchnorm=bn, activation="tanh"))
        width = hidden
    layers.append(_uniform_dense(rng, width, n_out, activation="identity"))
    return Mlp(layers)


def build_flow(arch: FlowArchitecture, seed: int) -> FlowModel:
    """
    Случайно инициализированный поток: веса ~ U(±1/sqrt(fan_in)), смещения 0,
    gamma=1, beta=0, running-статистики (0, 1). Маски чередуют чётные и
    нечётные координаты.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for idx in range(arch.n_layers):
        mask = alternating_mask(arch.dim, idx)
        n_pass = int(mask.sum())
        n_trans = arch.dim - n_pass
        nets = [
            build_mlp(n_pass, n_trans, arch.hidden, arch.n_hidden, arch.batchnorm, rng, arch.eps, arch.momentum)
            for _ in range(2)
        ]
        layers.append(CouplingLayer(mask=mask, s_net=nets[0], t_net=nets[1], scale_cap=arch.scale_cap))
    logger.debug(f"Построен поток: dim={arch.dim}, слоёв={arch.n_layers}, BatchNorm={arch.batchnorm}")
    return FlowModel(layers=layers, dim=arch.dim)


def _constant_mlp(n_in: int, n_out: int, bias: np.ndarray, trainable: bool = True) -> Mlp:
    return Mlp([DenseLayer(weight=np.zeros((n_in, n_out)), bias=bias, trainable=trainable)])


def build_identity_flow(dim: int, n_layers: int = 2, hidden: int = 4, batchnorm: bool = True) -> FlowModel:
    """Поток с нулевыми весами: s = 1, t = 0, то есть тождественное отображение."""
    rng = np.random.default_rng(0)
    layers = []
    for idx in range(n_layers):
        mask = alternating_mask(dim, idx)
        n_pass = int(mask.sum())
        nets = []
        for _ in range(2):
            net = build_mlp(n_pass, dim - n_pass, hidden, 1, batchnorm, rng)
            for dense in net.layers:
                dense.weight[...] = 0.0
            nets.append(net)
        layers.append(CouplingLayer(mask=mask, s_net=nets[0], t_net=nets[1]))
    return FlowModel(layers=layers, dim=dim)


def build_scaling_flow(dim: int, log_scale: float, scale_cap: float = 3.0) -> FlowModel:
    """
    Поток без BatchNorm, масштабирующий каждую координату: z = x * exp(log_scale).
    Сэмплы такой модели распределены как N(0, exp(-2 * log_scale) I).
    """
    if abs(log_scale) >= scale_cap:
        raise InputError(f"|log_scale| должен быть меньше scale_cap={scale_cap}")
    return build_affine_flow(np.zeros(dim), np.full(dim, float(log_scale)), scale_cap)


def build_affine_flow(shift, log_scale, scale_cap: Optional[float] = None) -> FlowModel:
    """
    Покоординатное аффинное отображение z = x * exp(log_scale) + shift из двух
    coupling-слоёв с постоянными s и t. По умолчанию scale_cap берётся с
    запасом: max(3, 2 * max|log_scale|).
    """
    shift = np.asarray(shift, dtype=np.float64).reshape(-1)
    log_scale = np.asarray(log_scale, dtype=np.float64).reshape(-1)
    if shift.shape != log_scale.shape:
        raise InputError(f"shift и log_scale разной длины: {shift.shape[0]} и {log_scale.shape[0]}")
    if not (np.all(np.isfinite(shift)) and np.all(np.isfinite(log_scale))):
        raise InputError("build_affine_flow: параметры должны быть конечными")
    cap = float(scale_cap) if scale_cap is not None else max(3.0, 2.0 * float(np.abs(log_scale).max()))
    if np.any(np.abs(log_scale) >= cap):
        raise InputError(f"|log_scale| должен быть меньше scale_cap={cap}")
    raw = cap * np.arctanh(log_scale / cap)

    dim = shift.shape[0]
    layers = []
    for idx in range(2):
        mask = alternating_mask(dim, idx)
        n_pass = int(mask.sum())
        layers.append(CouplingLayer(
            mask=mask,
            s_net=_constant_mlp(n_pass, dim - n_pass, raw[~mask]),
            t_net=_constant_mlp(n_pass, dim - n_pass, shift[~mask]),
            scale_cap=cap,
        ))
    return FlowModel(layers=layers, dim=dim)


def build_appendix_flow(
    pairs: int = 1,
    gamma: float = 1.0,
    beta: float = 0.0,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> FlowModel:
    """
    Один coupling-слой: z1 = x1, z2 = x2 + BN(x1) * gamma + beta.

    При pairs > 1 модель состоит из независимых пар (x1, x2): x1 стоят на
    чётных позициях, x2 - на нечётных. Линейные слои заморожены
    (trainable=False), поэтому свободны только gamma и beta. Определитель
    якобиана равен единице.
    """
    dim = 2 * pairs
    mask = alternating_mask(dim, 0)
    eye = np.eye(pairs)
    bn = BatchNormState(
        gamma=np.full(pairs, gamma),
        beta=np.full(pairs, beta),
        eps=eps,
        running_mean=np.zeros(pairs),
        running_var=np.ones(pairs),
        momentum=momentum,
    )
    t_net = Mlp([
        DenseLayer(weight=eye, bias=np.zeros(pairs), batchnorm=bn, activation="identity", trainable=False),
        DenseLayer(weight=eye.copy(), bias=np.zeros(pairs), activation="identity", trainable=False),
    ])
    s_net = _constant_mlp(pairs, pairs, np.zeros(pairs), trainable=False)
    return FlowModel(layers=[CouplingLayer(mask=mask, s_net=s_net, t_net=t_net)], dim=dim)


# ---------------------------------------------------------------------------
# Сериализация
# ---------------------------------------------------------------------------

def _bn_to_dict(state: BatchNormState) -> Dict[str, Any]:
    return {
        "gamma": state.gamma.tolist(),
        "beta": state.beta.tolist(),
        "eps": state.eps,
        "running_mean": state.running_mean.tolist(),
        "running_var": state.running_var.tolist(),
        "momentum": state.momentum,
    }


def _mlp_to_dict(net: Mlp) -> Dict[str, Any]:
    return {"layers": [
        {
            "weight": d.weight.tolist(),
            "bias": d.bias.tolist(),
            "activation": d.activation,
            "trainable": d.trainable,
            "batchnorm": _bn_to_dict(d.batchnorm) if d.batchnorm is not None else None,
        }
        for d in net.layers
    ]}


def model_to_dict(model: FlowModel) -> Dict[str, Any]:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "dim": model.dim,
        "layers": [
            {
                "mask": layer.mask.tolist(),
                "scale_cap": layer.scale_cap,
                "s_net": _mlp_to_dict(layer.s_net),
                "t_net": _mlp_to_dict(layer.t_net),
            }
            for layer in model.layers
        ],
    }


def _mlp_from_dict(data: Dict[str, Any]) -> Mlp:
    layers = []
    for d in data["layers"]:
        bn = d.get("batchnorm")
        layers.append(DenseLayer(
            weight=np.array(d["weight"], dtype=np.float64).reshape(len(d["weight"]), -1),
            bias=d["bias"],
            batchnorm=BatchNormState(**bn) if bn is not None else None,
            activation=d.get("activation", "identity"),
            trainable=bool(d.get("trainable", True)),
        ))
    return Mlp(layers)


def model_from_dict(data: Dict[str, Any]) -> FlowModel:
    if data.get("format") != MODEL_FORMAT:
        raise InputError(f"Неизвестный формат файла модели: {data.get('format')!r}")
    layers = [
        CouplingLayer(
            mask=layer["mask"],
            s_net=_mlp_from_dict(layer["s_net"]),
            t_net=_mlp_from_dict(layer["t_net"]),
            scale_cap=layer["scale_cap"],
        )
        for layer in data["layers"]
    ]
    return FlowModel(layers=layers, dim=data["dim"])


def save_model(model: FlowModel, path: str) -> None:
    """
    Сохраняет модель в JSON. Числа записываются кратчайшим представлением,
    которое однозначно восстанавливает float64, так что чтение даёт
    побитово ту же модель.
    """
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model_to_dict(model), f, indent=1)
    logger.info(f"Модель сохранена в {path}")


def load_model(path: str) -> FlowModel:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return model_from_dict(data)
