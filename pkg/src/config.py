"""
Модуль конфигурации лаборатории OoD-детекции.
Содержит параметры по умолчанию для всех модулей и загрузку конфигурации
запуска из INI-файла.
"""

import configparser
import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional

from exceptions import ConfigError

logger = logging.getLogger(__name__)

THREADS_ENV = 'OODNORM_THREADS'


@dataclass
class Config:
    """Параметры по умолчанию для всех модулей."""

    FLOW_PARAMS: Dict[str, Any] = None
    TRAIN_PARAMS: Dict[str, Any] = None
    ENSEMBLE_PARAMS: Dict[str, Any] = None
    STAT_PARAMS: Dict[str, Any] = None
    SCENARIO_PARAMS: Dict[str, Dict[str, Any]] = None
    ATTACK_PARAMS: Dict[str, Any] = None
    GAP_TEMPERATURES: List[float] = None
    SWEEP_RATIOS: List[float] = None
    EXIT_CODES: Dict[str, int] = None
    TEMPLATE_DIR: str = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..', 'templates')
    CSV_FLOAT_FORMAT: str = '%.17g'
    LOG_FILE: str = 'oodnorm.log'
    MANIFEST_FILE: str = 'manifest.json'

    def __post_init__(self):
        """Инициализация значений по умолчанию."""
        if self.FLOW_PARAMS is None:
            self.FLOW_PARAMS = {
                'kind': 'flow',  # flow | appendix
                'n_layers': 4,
                'hidden': 16,
                'n_hidden': 1,
                'batchnorm': True,
                'scale_cap': 3.0,
                'eps': 1e-5,
                'momentum': 0.1,
            }

        if self.TRAIN_PARAMS is None:
            # Размер батча 64 и стандартные гиперпараметры Adam
            self.TRAIN_PARAMS = {
                'batch_size': 64,
                'steps': 2000,
                'learning_rate': 1e-3,
                'adam_beta1': 0.9,
                'adam_beta2': 0.999,
                'adam_eps': 1e-8,
                'bn_momentum': 0.1,
                'holdout_fraction': 0.1,
                'eval_every': 10,
                'log_every': 100,
                'calibrate': False,
            }

        if self.ENSEMBLE_PARAMS is None:
            self.ENSEMBLE_PARAMS = {
                'k': 5,
                'enabled': False,
            }

        if self.STAT_PARAMS is None:
            self.STAT_PARAMS = {
                'b': 64,
                'r1': 0.1,
                'r2': 0.9,
                'mc_reps': 8,
                'n_reference': 256,
                'n_test': 256,
                'statistics': 'loglik,perm,waic,rank',
            }

        if self.SCENARIO_PARAMS is None:
            self.SCENARIO_PARAMS = {
                'gauss_mixture_1d': {'sigma': 0.1, 'plus_weight': 0.5},
                'appendix_2d': {'sigma': 0.05, 'slab_std': 1e-3, 'pairs': 1, 'plus_weight': 0.5},
                'uniform_q': {'a': -0.5, 'b': 0.5, 'slab_std': 1e-3, 'pairs': 1},
                'mode_trap': {'std': 0.01, 'slab_std': 1e-3, 'pairs': 1, 'layout': 'pairs'},
                'flow_temperature': {'temperature': 1.0},
            }

        if self.ATTACK_PARAMS is None:
            self.ATTACK_PARAMS = {
                't_lo': 0.5,
                't_hi': 2.0,
                'tol_bpd': 0.05,
                'max_iter': 30,
                'n_samples': 512,
                'grid_points': 5,
            }

        if self.GAP_TEMPERATURES is None:
            self.GAP_TEMPERATURES = [0.7, 1.0, 1.3]

        if self.SWEEP_RATIOS is None:
            self.SWEEP_RATIOS = [0.1, 0.3, 0.5, 0.7, 0.9]

        if self.EXIT_CODES is None:
            self.EXIT_CODES = {
                'ok': 0,
                'config': 2,
                'divergence': 3,
                'data': 4,
            }


# Глобальная конфигурация
CONFIG = Config()


def _scenario_section(name: str, n: int, label: int) -> Dict[str, Any]:
    section = {'name': name, 'n': n, 'label': label}
    # Общий набор ключей для всех сценариев; лишние игнорируются генератором
    section.update({
        'sigma': 0.05, 'slab_std': 1e-3, 'pairs': 1, 'a': -0.5, 'b': 0.5,
        'std': 0.01, 'layout': 'pairs', 'temperature': 1.0, 'plus_weight': 0.5,
    })
    return section


def default_run_sections() -> Dict[str, Dict[str, Any]]:
    """Полная конфигурация запуска со значениями по умолчанию."""
    flow = dict(CONFIG.FLOW_PARAMS)
    train = dict(CONFIG.TRAIN_PARAMS)
    stats = dict(CONFIG.STAT_PARAMS)
    attack = dict(CONFIG.ATTACK_PARAMS)
    attack['q_model'] = ''
    attack['q_fit'] = False
    return {
        'run': {'seed': 0},
        'model': flow,
        'train': train,
        'ensemble': dict(CONFIG.ENSEMBLE_PARAMS),
        'scenario.p': _scenario_section('appendix_2d', 4096, 0),
        'scenario.q': _scenario_section('uniform_q', 256, 1),
        'stats': stats,
        'sweep': {'ratios': ','.join(str(r) for r in CONFIG.SWEEP_RATIOS), 'test': 'q', 'n_test': 128},
        'attack': attack,
        'gap': {'temperatures': ','.join(str(t) for t in CONFIG.GAP_TEMPERATURES)},
        'paths': {'model': '', 'ensemble_dir': '', 'p_data': '', 'q_data': ''},
    }


def _coerce(raw: Any, default: Any, where: str) -> Any:
    """Приводит значение к типу значения по умолчанию."""
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: не удалось разобрать значение {text!r} как {type(default).__name__}") from None
    return text


class RunConfig:
    """
    Конфигурация одного запуска CLI: секции key = value поверх значений
    по умолчанию.

    Неизвестные секции и ключи считаются ошибкой конфигурации.
    """

    def __init__(self, sections: Optional[Dict[str, Dict[str, Any]]] = None):
        self.sections = default_run_sections()
        if sections:
            for section, values in sections.items():
                for key, value in values.items():
                    self.set(section, key, value)

    @classmethod
    def from_file(cls, path: str) -> 'RunConfig':
        """
        Загружает конфигурацию из INI-файла.

        Raises:
            ConfigError: Файл не найден, не разбирается или содержит неизвестные ключи
        """
        if not os.path.exists(path):
            raise ConfigError(f"Файл конфигурации не найден: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding='utf-8')
        except configparser.Error as e:
            raise ConfigError(f"Ошибка разбора {path}: {e}") from e

        sections = {name: dict(parser.items(name)) for name in parser.sections()}
        logger.info(f"Загружена конфигурация {path}: секций {len(sections)}")
        return cls(sections)

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in self.sections:
            raise ConfigError(f"Неизвестная секция конфигурации [{section}]")
        if key not in self.sections[section]:
            raise ConfigError(f"Неизвестный ключ {section}.{key}")
        default = self.sections[section][key]
        self.sections[section][key] = _coerce(value, default, f"{section}.{key}")

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """Применяет переопределения вида section.key=value."""
        for item in overrides or []:
            if '=' not in item:
                raise ConfigError(f"Переопределение должно иметь вид section.key=value: {item!r}")
            target, value = item.split('=', 1)
            if '.' not in target:
                raise ConfigError(f"Не указана секция в переопределении {item!r}")
            section, key = target.strip().rsplit('.', 1)
            self.set(section, key, value)

    def section(self, name: str) -> Dict[str, Any]:
        return copy.deepcopy(self.sections[name])

    def get(self, section: str, key: str) -> Any:
        return self.sections[section][key]

    @property
    def seed(self) -> int:
        return int(self.sections['run']['seed'])

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.sections)

    def config_hash(self) -> str:
        """SHA-256 канонического представления конфигурации."""
        canonical = json.dumps(self.sections, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def parse_float_list(text: str, where: str) -> List[float]:
    try:
        values = [float(part) for part in str(text).split(',') if part.strip()]
    except ValueError:
        raise ConfigError(f"{where}: ожидается список чисел через запятую, получено {text!r}") from None
    if not values:
        raise ConfigError(f"{where}: пустой список")
    return values


def worker_threads() -> int:
    """Число рабочих потоков из OODNORM_THREADS (по умолчанию 1)."""
    raw = os.environ.get(THREADS_ENV, '').strip()
    if not raw:
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} должна быть целым числом, получено {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"{THREADS_ENV} должна быть >= 1, получено {threads}")
    return threads
