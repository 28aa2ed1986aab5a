"""
Метрики бинарной детекции: ROC AUC, average precision и сборка отчётов.
Метка 1 - кандидат в OoD, большее значение статистики - более вероятный OoD.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score, roc_curve

from data_processing import read_frame_csv, write_frame_csv
from exceptions import DataError

if TYPE_CHECKING:
    from ood_statistics import ScoredSample

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['statistic', 'auc', 'ap', 'n_pos', 'n_neg']
SCORE_COLUMNS = ['sample_id', 'statistic_name', 'score', 'label']


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.shape != labels.shape:
        raise DataError(f"Длины scores ({scores.shape[0]}) и labels ({labels.shape[0]}) не совпадают")
    if not np.all(np.isin(labels, (0, 1))):
        raise DataError("Метки должны принимать значения 0 или 1")
    if not np.all(np.isfinite(scores)):
        raise DataError("Значения статистики должны быть конечными")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """
    Площадь под ROC-кривой: вероятность того, что случайный положительный
    образец получит большую оценку, чем случайный отрицательный; ничьи
    дают 1/2.

    Raises:
        DataError: Присутствует только один класс
    """
    scores, labels = _validate(scores, labels)
    if labels.min() == labels.max():
        raise DataError("Для AUC нужны образцы обоих классов")
    return float(roc_auc_score(labels, scores))


def average_precision(scores, labels) -> float:
    """
    Average precision: среднее значение precision в позициях положительных
    образцов при сортировке по убыванию оценки. При равных оценках порядок
    определяется индексом образца (стабильная сортировка).

    Raises:
        DataError: Нет положительных образцов
    """
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DataError("Для AP нужен хотя бы один положительный образец")
    order = np.argsort(-scores, kind='stable')
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, hits.shape[0] + 1)
    return float(precision[hits == 1].sum() / n_pos)


def roc_points(scores, labels) -> pd.DataFrame:
    """Точки ROC-кривой (fpr, tpr, threshold) для экспорта в CSV."""
    scores, labels = _validate(scores, labels)
    if labels.min() == labels.max():
        raise DataError("Для ROC-кривой нужны образцы обоих классов")
    fpr, tpr, thresholds = roc_curve(labels, scores)
    return pd.DataFrame({'fpr': fpr, 'tpr': tpr, 'threshold': thresholds})


@dataclass
class DetectionReport:
    """Результат оценки одной статистики на помеченной выборке."""

    statistic_name: str
    scores: np.ndarray
    labels: np.ndarray
    auc: float
    ap: float
    n_pos: int
    n_neg: int

    def to_row(self) -> dict:
        return {
            'statistic': self.statistic_name,
            'auc': self.auc,
            'ap': self.ap,
            'n_pos': self.n_pos,
            'n_neg': self.n_neg,
        }


def report_from_scores(statistic_name: str, scores, labels) -> DetectionReport:
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = int(labels.shape[0] - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError(f"Статистика {statistic_name}: в выборке присутствует только один класс")
    report = DetectionReport(
        statistic_name=statistic_name,
        scores=scores,
        labels=labels,
        auc=roc_auc(scores, labels),
        ap=average_precision(scores, labels),
        n_pos=n_pos,
        n_neg=n_neg,
    )
    logger.info(f"{statistic_name}: AUC={report.auc:.4f}, AP={report.ap:.4f} (pos={n_pos}, neg={n_neg})")
    return report


def build_report(statistic_name: str, scored: Sequence['ScoredSample']) -> DetectionReport:
    """
    Собирает отчёт по списку оценённых образцов.

    Raises:
        DataError: В выборке только один класс
    """
    if not scored:
        raise DataError(f"Статистика {statistic_name}: пустой список образцов")
    return report_from_scores(
        statistic_name,
        [s.score for s in scored],
        [s.label for s in scored],
    )


def reports_to_frame(reports: List[DetectionReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports], columns=REPORT_COLUMNS)


def scores_to_frame(reports: List[DetectionReport]) -> pd.DataFrame:
    """Таблица sample_id, statistic_name, score, label по всем отчётам."""
    frames = [
        pd.DataFrame({
            'sample_id': np.arange(r.scores.shape[0]),
            'statistic_name': r.statistic_name,
            'score': r.scores,
            'label': r.labels,
        })
        for r in reports
    ]
    if not frames:
        return pd.DataFrame(columns=SCORE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[SCORE_COLUMNS]


def write_report_csv(reports: List[DetectionReport], path: str) -> str:
    return write_frame_csv(reports_to_frame(reports), path)


def write_scores_csv(reports: List[DetectionReport], path: str) -> str:
    return write_frame_csv(scores_to_frame(reports), path)


def read_scores_csv(path: str) -> List[DetectionReport]:
    """Восстанавливает отчёты из таблицы оценок (AUC и AP пересчитываются)."""
    df = read_frame_csv(path)
    missing = set(SCORE_COLUMNS) - set(df.columns)
    if missing:
        raise DataError(f"В таблице оценок {path} нет столбцов: {sorted(missing)}")
    reports = []
    for name, group in df.groupby('statistic_name', sort=False):
        group = group.sort_values('sample_id', kind='stable')
        reports.append(report_from_scores(name, group['score'].to_numpy(), group['label'].to_numpy()))
    return reports


def read_report_csv(path: str) -> pd.DataFrame:
    df = read_frame_csv(path)
    missing = set(REPORT_COLUMNS) - set(df.columns)
    if missing:
        raise DataError(f"В отчёте {path} нет столбцов: {sorted(missing)}")
    return df
