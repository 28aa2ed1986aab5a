"""
Модуль ввода-вывода данных лаборатории.
Наборы данных, журналы обучения и таблицы результатов хранятся в CSV;
числа пишутся с 17 значащими цифрами, поэтому чтение восстанавливает
значения float64 побитово.
"""

import logging
import os
from typing import Dict

import pandas as pd

from config import CONFIG
from exceptions import DataError
from synthetic_data import Dataset

logger = logging.getLogger(__name__)


def write_frame_csv(df: pd.DataFrame, path: str) -> str:
    """Сохраняет таблицу в CSV с форматом чисел CONFIG.CSV_FLOAT_FORMAT."""
    df.to_csv(path, index=False, float_format=CONFIG.CSV_FLOAT_FORMAT, encoding='utf-8', lineterminator='\n')
    logger.info(f"Сохранена таблица {os.path.basename(path)}: {len(df)} строк")
    return path


def read_frame_csv(path: str) -> pd.DataFrame:
    """
    Загружает таблицу из CSV.

    Raises:
        DataError: Файл не найден
    """
    if not os.path.exists(path):
        raise DataError(f"Файл не найден: {path}")
    return pd.read_csv(path, comment='#', float_precision='round_trip', encoding='utf-8')


def _format_header(meta: Dict[str, object]) -> str:
    return '# ' + ' '.join(f"{k}={v}" for k, v in meta.items()) + '\n'


def _parse_header(line: str) -> Dict[str, str]:
    meta = {}
    for token in line.lstrip('#').split():
        if '=' in token:
            key, value = token.split('=', 1)
            meta[key] = value
    return meta


def write_dataset_csv(dataset: Dataset, path: str) -> str:
    """
    Сохраняет набор данных: первая строка - комментарий с метаданными
    (сценарий, размерность, метка), далее столбцы x0, x1, ...
    """
    df = pd.DataFrame(dataset.data, columns=[f"x{i}" for i in range(dataset.dim)])
    meta = {'scenario': dataset.scenario or 'unknown', 'dim': dataset.dim, 'label': dataset.label}
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(_format_header(meta))
        df.to_csv(f, index=False, float_format=CONFIG.CSV_FLOAT_FORMAT, lineterminator='\n')
    logger.info(f"Сохранён набор {dataset.scenario}: {dataset.n_samples} образцов -> {path}")
    return path


def read_dataset_csv(path: str) -> Dataset:
    """
    Загружает набор данных, записанный write_dataset_csv.

    Raises:
        DataError: Файл не найден, пуст или размерность не совпадает с заголовком
    """
    if not os.path.exists(path):
        raise DataError(f"Файл набора данных не найден: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
    meta = _parse_header(first) if first.startswith('#') else {}

    df = read_frame_csv(path)
    columns = [c for c in df.columns if c.startswith('x')]
    if df.empty or not columns:
        raise DataError(f"Набор данных {path} пуст")
    if 'dim' in meta and int(meta['dim']) != len(columns):
        raise DataError(f"Размерность в заголовке {meta['dim']} не совпадает с числом столбцов {len(columns)}")

    return Dataset(
        df[columns].to_numpy(dtype='float64'),
        label=int(meta.get('label', 0)),
        scenario=meta.get('scenario', ''),
    )
