"""
Исключения лаборатории OoD-детекции.
Библиотечные функции только выбрасывают их, коды возврата назначает main.py.
"""

from typing import Optional


class OodNormError(Exception):
    """Базовое исключение проекта."""


class ConfigError(OodNormError, ValueError):
    """Ошибка конфигурации (код возврата 2)."""


class InputError(OodNormError, ValueError):
    """Некорректные входные данные: нечисловые значения, неверная форма."""


class DegenerateBatchError(InputError):
    """Батч из одной строки в training mode."""


class DimensionMismatchError(InputError):
    """Размерность батча не совпадает с размерностью модели."""


class DataError(OodNormError, ValueError):
    """Недостаточно данных: пустые пулы, один класс меток, нет ансамбля (код 4)."""


class DivergenceError(OodNormError, RuntimeError):
    """Функция потерь перестала быть конечной (код возврата 3)."""

    def __init__(self, message: str, step: Optional[int] = None, seed: Optional[int] = None):
        details = []
        if step is not None:
            details.append(f"шаг {step}")
        if seed is not None:
            details.append(f"seed {seed}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)
        self.step = step
        self.seed = seed
