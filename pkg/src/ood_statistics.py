"""
Статистики OoD-детекции для моделей правдоподобия.

    loglik  - минус правдоподобие в evaluation mode
    perm    - ранговая статистика |#{train ll <= ll(x)} - N/2|, флагует оба хвоста
    waic    - -E[ll] + Var[ll] по ансамблю
    S/delta/rank - условное правдоподобие в смешанных батчах с долей r тестовых
                   образцов, разность между двумя долями и её ранг среди
                   обучающих образцов
    mode gap     - разрыв среднего BPD между training и evaluation mode

Здесь же атака температурой, подгоняющая сэмплы другой модели под медианный
BPD обучающих данных, чтобы обмануть perm.

Модель - любой объект с методом log_likelihood(x, mode) и атрибутом dim
(FlowModel или GaussianFit).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import CONFIG, worker_threads
from evaluation_metrics import roc_auc
from exceptions import ConfigError, DataError, InputError
from flow_model import EvalMode, bpd
from synthetic_data import Dataset, sample_temperature

logger = logging.getLogger(__name__)

STREAM_REFERENCE = 0
STREAM_TEST = 1

# Допуск на округление r * b вниз (0.29 * 100 = 28.999999999999996)
_FLOOR_SLACK = 1e-9


@dataclass
class StatisticConfig:
    """Параметры смешанных батчей."""

    b: int = CONFIG.STAT_PARAMS['b']
    r1: float = CONFIG.STAT_PARAMS['r1']
    r2: float = CONFIG.STAT_PARAMS['r2']
    mc_reps: int = CONFIG.STAT_PARAMS['mc_reps']
    seed: int = 0

    def __post_init__(self):
        if self.b < 2:
            raise ConfigError(f"Размер батча b должен быть >= 2, получено {self.b}")
        if not 0.0 < self.r1 <= self.r2 <= 1.0:
            raise ConfigError(f"Требуется 0 < r1 <= r2 <= 1, получено r1={self.r1}, r2={self.r2}")
        if math.floor(self.r1 * self.b + _FLOOR_SLACK) < 1:
            raise ConfigError(f"floor(r1 * b) должен быть >= 1 (r1={self.r1}, b={self.b})")
        if self.mc_reps < 1:
            raise ConfigError(f"mc_reps должен быть >= 1, получено {self.mc_reps}")
        if self.seed < 0:
            raise ConfigError(f"seed должен быть неотрицательным, получено {self.seed}")


@dataclass
class ScoredSample:
    """Образец с оценкой статистики и меткой (0 - из обучающего распределения, 1 - OoD)."""

    sample: np.ndarray
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InputError("ScoredSample: оценка должна быть конечной")


@dataclass
class AttackResult:
    tuned_T: float
    median_gap_bpd: float
    fooled_auc: float
    iterations: int = 0
    samples: Optional[Dataset] = None


def scored_samples(dataset: Dataset, scores: Sequence[float]) -> List[ScoredSample]:
    return [ScoredSample(row, float(s), dataset.label) for row, s in zip(dataset.data, scores)]


def slot_counts(r: float, b: int) -> Tuple[int, int]:
    """Число тестовых компаньонов n_q = max(floor(r*b) - 1, 0) и обучающих n_p = b - 1 - n_q."""
    n_q = max(math.floor(r * b + _FLOOR_SLACK) - 1, 0)
    return n_q, b - 1 - n_q


def _as_rows(x) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(getattr(x, 'data', x), dtype=np.float64)
    single = arr.ndim == 1
    return (arr[None, :] if single else arr), single


def _map_samples(fn: Callable[[int], object], n: int) -> list:
    threads = worker_threads()
    if threads == 1 or n < 2:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=min(threads, n)) as pool:
        return list(pool.map(fn, range(n)))


# ---------------------------------------------------------------------------
# Статистики на правдоподобии в evaluation mode
# ---------------------------------------------------------------------------

def stat_loglik(model, x):
    """
    Минус правдоподобие в evaluation mode (больше - более вероятный OoD).

    Для одного вектора возвращает число, для матрицы - вектор оценок.

    Raises:
        InputError: Правдоподобие не конечно
    """
    rows, single = _as_rows(x)
    ll = model.log_likelihood(rows, EvalMode.EVALUATION)
    if not np.all(np.isfinite(ll)):
        raise InputError("stat_loglik: правдоподобие не конечно")
    scores = -ll
    return float(scores[0]) if single else scores


def perm_scores(logliks, train_logliks) -> np.ndarray:
    """|#{i: train_ll_i <= ll} - N/2| для каждого значения ll."""
    reference = np.sort(np.asarray(train_logliks, dtype=np.float64).reshape(-1))
    if reference.shape[0] == 0:
        raise DataError("Пустой набор обучающих правдоподобий")
    counts = np.searchsorted(reference, np.asarray(logliks, dtype=np.float64), side='right')
    return np.abs(counts - reference.shape[0] / 2.0)


def stat_perm(model, x, train_logliks):
    """
    Ранговая статистика правдоподобия: флагует образцы и с аномально
    высоким, и с аномально низким правдоподобием.

    Args:
        model: Модель
        x: Образец или матрица образцов
        train_logliks: Правдоподобия обучающих образцов (N >= 1)

    Returns:
        Значение из [0, N/2]; для матрицы - вектор
    """
    rows, single = _as_rows(x)
    scores = perm_scores(model.log_likelihood(rows, EvalMode.EVALUATION), train_logliks)
    return float(scores[0]) if single else scores


def stat_waic(ensemble: Sequence, x):
    """WAIC: -E_theta[ll] + Var_theta[ll] с популяционной дисперсией по участникам."""
    if not ensemble:
        raise DataError("Для WAIC нужен непустой ансамбль")
    rows, single = _as_rows(x)
    lls = np.stack([m.log_likelihood(rows, EvalMode.EVALUATION) for m in ensemble])
    scores = -lls.mean(axis=0) + lls.var(axis=0)
    return float(scores[0]) if single else scores


# ---------------------------------------------------------------------------
# Смешанные батчи
# ---------------------------------------------------------------------------

def _replicate_rng(cfg: StatisticConfig, stream: int, sample_index: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, stream, sample_index, rep]))


def _conditional_logliks(
    model,
    x: np.ndarray,
    fill_pool: np.ndarray,
    p_pool: np.ndarray,
    ratios: Sequence[float],
    cfg: StatisticConfig,
    sample_index: int,
    stream: int,
    exclude: Optional[int] = None,
) -> np.ndarray:
    """
    Условные правдоподобия x в смешанных батчах для каждой доли r и повтора.

    В каждом повторе тестовые компаньоны берутся префиксом одной перестановки
    fill_pool (без exclude), обучающие - префиксом одной перестановки p_pool.
    Одни и те же перестановки используются для всех r, так что батчи разных
    долей вложены друг в друга.

    Returns:
        Массив (len(ratios), mc_reps)
    """
    counts = [slot_counts(r, cfg.b) for r in ratios]
    need_q = max(c[0] for c in counts)
    need_p = max(c[1] for c in counts)

    candidates = np.arange(fill_pool.shape[0])
    if exclude is not None:
        candidates = candidates[candidates != exclude]
    if candidates.shape[0] < need_q:
        raise DataError(f"Тестовый пул слишком мал: нужно {need_q}, доступно {candidates.shape[0]}")
    if p_pool.shape[0] < need_p:
        raise DataError(f"Обучающий пул слишком мал: нужно {need_p}, доступно {p_pool.shape[0]}")

    batches = []
    for rep in range(cfg.mc_reps):
        rng = _replicate_rng(cfg, stream, sample_index, rep)
        q_order = candidates[rng.permutation(candidates.shape[0])[:need_q]]
        p_order = rng.permutation(p_pool.shape[0])[:need_p]
        for n_q, n_p in counts:
            batches.append(np.concatenate([x[None, :], fill_pool[q_order[:n_q]], p_pool[p_order[:n_p]]], axis=0))

    # все батчи одного размера b, поэтому считаются одной стопкой
    ll = model.log_likelihood(np.stack(batches), EvalMode.TRAINING)[:, 0]
    return ll.reshape(cfg.mc_reps, len(ratios)).T


def _check_ratio(r: float) -> None:
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"Доля тестовых образцов должна лежать в (0, 1], получено {r}")


def stat_S(
    model,
    x,
    p_pool: Dataset,
    q_pool: Dataset,
    r: float,
    cfg: StatisticConfig,
    sample_index: int = 0,
    exclude: Optional[int] = None,
    stream: int = STREAM_TEST,
) -> float:
    """
    Ожидаемое условное правдоподобие x в батче из b образцов, где доля r
    позиций отдана тестовым образцам (x и floor(r*b) - 1 компаньонов из
    q_pool), остальные - обучающим из p_pool. Оценка Монте-Карло по
    cfg.mc_reps составам батча.

    Args:
        exclude: Индекс x в q_pool, если x сам из тестового пула

    Raises:
        DataError: Пулы слишком малы
    """
    _check_ratio(r)
    row = np.asarray(x, dtype=np.float64).reshape(-1)
    ll = _conditional_logliks(model, row, q_pool.data, p_pool.data, [r], cfg, sample_index, stream, exclude)
    return float(ll[0].mean())


def stat_delta(
    model,
    x,
    p_pool: Dataset,
    q_pool: Dataset,
    cfg: StatisticConfig,
    sample_index: int = 0,
    exclude: Optional[int] = None,
    stream: int = STREAM_TEST,
) -> float:
    """|S(r1) - S(r2)| с общими составами батчей для обеих долей."""
    row = np.asarray(x, dtype=np.float64).reshape(-1)
    ratios = [cfg.r1] if cfg.r1 == cfg.r2 else [cfg.r1, cfg.r2]
    ll = _conditional_logliks(model, row, q_pool.data, p_pool.data, ratios, cfg, sample_index, stream, exclude)
    if len(ratios) == 1:
        return 0.0
    return float(abs(ll[0].mean() - ll[1].mean()))


def score_dataset(
    model,
    dataset: Dataset,
    p_pool: Dataset,
    cfg: StatisticConfig,
    stream: int = STREAM_TEST,
    index_offset: int = 0,
) -> np.ndarray:
    """
    Delta для каждого образца набора; тестовые позиции заполняются другими
    образцами того же набора.

    Args:
        index_offset: Сдвиг номера образца в seed повторов (чтобы разные
            куски одного потока не делили составы батчей)
    """
    def score(i: int) -> float:
        return stat_delta(
            model, dataset.data[i], p_pool, dataset, cfg,
            sample_index=index_offset + i, exclude=i, stream=stream,
        )

    return np.asarray(_map_samples(score, dataset.n_samples), dtype=np.float64)


def reference_deltas(
    model,
    reference_set: Dataset,
    p_pool: Dataset,
    cfg: StatisticConfig,
    block_size: Optional[int] = None,
) -> np.ndarray:
    """
    Эталонное распределение Delta по обучающим образцам.

    reference_set делится на блоки примерно по block_size образцов, и
    тестовые позиции каждого образца заполняются другими образцами его
    блока. block_size должен совпадать с размером оцениваемого тестового
    набора, иначе эталонные и тестовые Delta распределены по-разному даже
    в нулевом случае. Без block_size весь reference_set - один блок.
    p_pool не должен пересекаться с reference_set.

    Raises:
        DataError: Пустой эталонный набор или block_size < 1
    """
    n = reference_set.n_samples
    if n == 0:
        raise DataError("Пустой эталонный набор")
    if block_size is None:
        block_size = n
    if block_size < 1:
        raise DataError(f"Размер блока должен быть >= 1, получено {block_size}")
    if n < block_size:
        logger.warning(f"Эталонный набор ({n}) меньше тестового ({block_size}): Delta смещены относительно тестовых")

    blocks = np.array_split(np.arange(n), max(n // block_size, 1))
    logger.debug(f"Эталонные Delta: {len(blocks)} блоков по ~{blocks[0].shape[0]} образцов")
    return np.concatenate([
        score_dataset(model, reference_set.subset(idx), p_pool, cfg, stream=STREAM_REFERENCE, index_offset=int(idx[0]))
        for idx in blocks
    ])


def stat_T_rank(delta_x, train_deltas):
    """
    Ранг Delta(x) среди эталонных значений: #{i: Delta_i <= Delta(x)}.

    Для массива delta_x возвращает массив рангов.
    """
    reference = np.sort(np.asarray(train_deltas, dtype=np.float64).reshape(-1))
    if reference.shape[0] == 0:
        raise DataError("Пустое эталонное распределение Delta")
    ranks = np.searchsorted(reference, np.asarray(delta_x, dtype=np.float64), side='right')
    return int(ranks) if np.ndim(ranks) == 0 else ranks


def sweep_ratio(model, test_set: Dataset, train_set: Dataset, ratios: Sequence[float], cfg: StatisticConfig) -> pd.DataFrame:
    """
    Средний BPD тестовых образцов в смешанных батчах для каждой доли r.

    Returns:
        Таблица со столбцами ratio, mean_bpd, stderr (стандартная ошибка по образцам)
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise ConfigError("Список долей для развёртки пуст")
    for r in ratios:
        _check_ratio(r)

    def per_sample(i: int) -> np.ndarray:
        ll = _conditional_logliks(
            model, test_set.data[i], test_set.data, train_set.data, ratios, cfg,
            sample_index=i, stream=STREAM_TEST, exclude=i,
        )
        return bpd(ll.mean(axis=1), test_set.dim)

    values = np.stack(_map_samples(per_sample, test_set.n_samples))
    n = values.shape[0]
    stderr = values.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(len(ratios), np.nan)
    return pd.DataFrame({'ratio': ratios, 'mean_bpd': values.mean(axis=0), 'stderr': stderr})


# ---------------------------------------------------------------------------
# Разрыв между режимами BatchNorm
# ---------------------------------------------------------------------------

def training_mode_bpd(model, dataset: Dataset, b: int) -> float:
    """
    Средний BPD набора в training mode по непересекающимся батчам из b его
    собственных образцов; остаток n mod b отбрасывается.

    Raises:
        DataError: В наборе меньше b образцов
    """
    n_batches = dataset.n_samples // b
    if b < 2 or n_batches < 1:
        raise DataError(f"Для батчей из {b} образцов нужно не меньше {max(b, 2)} образцов, получено {dataset.n_samples}")
    batches = dataset.data[:n_batches * b].reshape(n_batches, b, dataset.dim)
    ll = model.log_likelihood(batches, EvalMode.TRAINING)
    return float(bpd(ll, dataset.dim).mean())


def mode_gap_table(model, datasets: Sequence[Tuple[str, Dataset]], b: int) -> pd.DataFrame:
    """
    Средний BPD в evaluation и training mode для каждого набора и разрыв
    gap_bpd = train_bpd - eval_bpd. Для данных p разрыв близок к нулю,
    для OoD-наборов он на порядок больше.

    Returns:
        Таблица dataset, n_samples, eval_bpd, train_bpd, gap_bpd
    """
    rows = []
    for name, dataset in datasets:
        eval_bpd = float(bpd(model.log_likelihood(dataset.data, EvalMode.EVALUATION), dataset.dim).mean())
        train_bpd = training_mode_bpd(model, dataset, b)
        rows.append({
            'dataset': name,
            'n_samples': dataset.n_samples,
            'eval_bpd': eval_bpd,
            'train_bpd': train_bpd,
            'gap_bpd': train_bpd - eval_bpd,
        })
        logger.info(f"  {name}: eval={eval_bpd:.4f}, train={train_bpd:.4f}, разрыв={train_bpd - eval_bpd:.4f} BPD")
    return pd.DataFrame(rows, columns=['dataset', 'n_samples', 'eval_bpd', 'train_bpd', 'gap_bpd'])


# ---------------------------------------------------------------------------
# Атака температурой
# ---------------------------------------------------------------------------

def _median_bpd(model, data: np.ndarray) -> float:
    return float(np.median(bpd(model.log_likelihood(data, EvalMode.EVALUATION), model.dim)))


def attack_tune_temperature(
    p_model,
    q_model,
    bracket: Tuple[float, float],
    target: Dataset,
    reference: Optional[Dataset] = None,
    n_samples: int = CONFIG.ATTACK_PARAMS['n_samples'],
    seed: int = 0,
    tol_bpd: float = CONFIG.ATTACK_PARAMS['tol_bpd'],
    max_iter: int = CONFIG.ATTACK_PARAMS['max_iter'],
    grid_points: int = CONFIG.ATTACK_PARAMS['grid_points'],
) -> AttackResult:
    """
    Подбирает температуру T сэмплов q_model бисекцией так, чтобы медианный
    BPD этих сэмплов под p_model совпал с медианным BPD target.

    Латенты фиксированы (одинаковый seed для всех T), поэтому медианный
    разрыв - детерминированная функция T. Монотонность проверяется на сетке
    из grid_points точек; разрыв на концах интервала должен иметь разные знаки.

    Args:
        reference: Набор для эталонных правдоподобий perm (по умолчанию target)

    Returns:
        AttackResult с подобранной T, остаточным разрывом, AUC статистики perm
        на атакующих сэмплах против target и самими сэмплами

    Raises:
        ConfigError: Некорректный или немонотонный интервал
        DataError: Пустой target
    """
    t_lo, t_hi = float(bracket[0]), float(bracket[1])
    if not 0.0 < t_lo < t_hi:
        raise ConfigError(f"Некорректный интервал температур [{t_lo}, {t_hi}]")
    if target.n_samples == 0:
        raise DataError("Пустой набор целевых образцов")
    if n_samples < 1:
        raise DataError("Число атакующих образцов должно быть >= 1")
    if max_iter < 1:
        raise ConfigError(f"max_iter должен быть >= 1, получено {max_iter}")

    target_median = _median_bpd(p_model, target.data)

    def gap(T: float) -> Tuple[float, Dataset]:
        attacked = sample_temperature(q_model, n_samples, T, seed)
        return _median_bpd(p_model, attacked.data) - target_median, attacked

    grid = np.linspace(t_lo, t_hi, max(grid_points, 2))
    grid_gaps = np.array([gap(T)[0] for T in grid])
    steps = np.diff(grid_gaps)
    increasing = bool(np.all(steps >= 0))
    if not (increasing or np.all(steps <= 0)):
        raise ConfigError(f"Медианный BPD не монотонен по T на [{t_lo}, {t_hi}]")
    if grid_gaps[0] * grid_gaps[-1] > 0:
        raise ConfigError(
            f"На интервале [{t_lo}, {t_hi}] нет решения: разрыв {grid_gaps[0]:.4f} .. {grid_gaps[-1]:.4f} BPD"
        )

    lo, hi = t_lo, t_hi
    best_T, best_gap, best_samples = None, math.inf, None
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        mid_gap, attacked = gap(mid)
        if abs(mid_gap) < abs(best_gap):
            best_T, best_gap, best_samples = mid, mid_gap, attacked
        logger.debug(f"Бисекция {iterations}: T={mid:.6f}, разрыв={mid_gap:.6f} BPD")
        if abs(mid_gap) <= tol_bpd:
            break
        if (mid_gap < 0) == increasing:
            lo = mid
        else:
            hi = mid
    else:
        logger.warning(f"Бисекция исчерпала {max_iter} итераций, разрыв {best_gap:.4f} BPD")

    ref = reference if reference is not None else target
    train_ll = p_model.log_likelihood(ref.data, EvalMode.EVALUATION)
    scores = np.concatenate([
        perm_scores(p_model.log_likelihood(best_samples.data, EvalMode.EVALUATION), train_ll),
        perm_scores(p_model.log_likelihood(target.data, EvalMode.EVALUATION), train_ll),
    ])
    labels = np.concatenate([np.ones(best_samples.n_samples, dtype=int), np.zeros(target.n_samples, dtype=int)])
    fooled_auc = roc_auc(scores, labels)

    logger.info(f"Атака: T={best_T:.4f}, разрыв медиан={best_gap:.4f} BPD, AUC perm={fooled_auc:.4f}")
    return AttackResult(
        tuned_T=best_T,
        median_gap_bpd=best_gap,
        fooled_auc=fooled_auc,
        iterations=iterations,
        samples=best_samples,
    )
