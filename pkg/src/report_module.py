"""
Модуль формирования сводного отчёта по результатам запусков.
Собирает таблицы из выходной директории и рендерит Markdown через Jinja2.
"""

import json
import logging
import math
import os
from typing import Any, Dict, List, Optional

import jinja2

from config import CONFIG
from data_processing import read_frame_csv
from exceptions import DataError

logger = logging.getLogger(__name__)

SUMMARY_FILE = 'summary.md'
TEMPLATE_NAME = 'report.md.j2'

# Таблицы, которые попадают в отчёт, если присутствуют в директории
TABLES = {
    'detection': 'detection_report.csv',
    'sweep': 'sweep.csv',
    'mode_gap': 'mode_gap.csv',
    'attack': 'attack_result.csv',
    'attack_reports': 'attack_report.csv',
    'train_log': 'train_log.csv',
}


def _format_float_filter(value: Any, digits: int = 4) -> str:
    """Форматирует число для таблиц отчёта; NaN выводится как прочерк."""
    if value is None:
        return '—'
    try:
        number = float(value)
    except (TypeError, ValueError):
        return str(value)
    if math.isnan(number):
        return '—'
    return f"{number:.{digits}f}"


def load_manifest(out_dir: str) -> Dict[str, Any]:
    path = os.path.join(out_dir, CONFIG.MANIFEST_FILE)
    if not os.path.exists(path):
        raise DataError(f"В директории {out_dir} нет {CONFIG.MANIFEST_FILE}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def _collect_tables(out_dir: str) -> Dict[str, List[Dict[str, Any]]]:
    tables = {}
    for key, filename in TABLES.items():
        path = os.path.join(out_dir, filename)
        if os.path.exists(path):
            tables[key] = read_frame_csv(path).to_dict(orient='records')
    return tables


def _train_summary(rows: List[Dict[str, Any]]) -> Optional[Dict[str, Any]]:
    if not rows:
        return None
    evaluated = [r for r in rows if not math.isnan(float(r['eval_bpd_holdout']))]
    head = rows[:100]
    tail = rows[-100:]
    return {
        'steps': int(rows[-1]['step']),
        'initial_loss': sum(r['train_loss_nats'] for r in head) / len(head),
        'final_loss': sum(r['train_loss_nats'] for r in tail) / len(tail),
        'final_eval_bpd': evaluated[-1]['eval_bpd_holdout'] if evaluated else None,
    }


def _get_default_template() -> str:
    return """# Сводка запуска

Хеш конфигурации: `{{ manifest.config_hash }}`

{% for key, rows in tables.items() %}## {{ key }}

{% for row in rows %}- {% for k, v in row.items() %}{{ k }}={{ v | fmt }} {% endfor %}
{% endfor %}
{% endfor %}"""


def render_summary(out_dir: str, template_dir: Optional[str] = None) -> str:
    """
    Рендерит summary.md по артефактам выходной директории.

    Args:
        out_dir: Директория с manifest.json и таблицами
        template_dir: Директория шаблонов (по умолчанию CONFIG.TEMPLATE_DIR)

    Returns:
        Путь к summary.md

    Raises:
        DataError: Нет manifest.json
    """
    manifest = load_manifest(out_dir)
    tables = _collect_tables(out_dir)

    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(template_dir or CONFIG.TEMPLATE_DIR),
        autoescape=False,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    env.filters['fmt'] = _format_float_filter

    try:
        template = env.get_template(TEMPLATE_NAME)
    except jinja2.TemplateNotFound:
        logger.warning(f"Шаблон {TEMPLATE_NAME} не найден, используем базовый шаблон")
        template = env.from_string(_get_default_template())

    text = template.render(
        manifest=manifest,
        tables=tables,
        train=_train_summary(tables.get('train_log', [])),
    )
    path = os.path.join(out_dir, SUMMARY_FILE)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    logger.info(f"Сводный отчёт сохранён в {path}")
    return path
