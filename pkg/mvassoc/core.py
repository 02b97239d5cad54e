"""
mvassoc/core.py
Базовая инфраструктура пакета:
- логирование (единый формат для CLI и тестов)
- иерархия исключений
- ссылка на маску MaskRef (общая для всех модулей)
- пул потоков с сохранением порядка результатов
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, NamedTuple, Optional, TypeVar

from mvassoc import settings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


# ---------------------------------------------------------------------------
# Логирование
# ---------------------------------------------------------------------------

def configure_logging(level: Optional[str] = None) -> None:
    """
    Настроить корневой логгер в формате проекта.

    :param level: имя уровня ("DEBUG", "INFO", ...); по умолчанию MVASSOC_LOG_LEVEL
    """
    name = (level or settings.LOG_LEVEL).upper()
    logging.basicConfig(
        format=settings.LOG_FORMAT,
        level=getattr(logging, name, logging.INFO),
    )
    logger.debug("logging configured level=%s", name)


# ---------------------------------------------------------------------------
# Исключения
# ---------------------------------------------------------------------------

class MvassocError(ValueError):
    """Базовая ошибка пакета (все ошибки входных данных)."""


class ColmapParseError(MvassocError):
    """Некорректная строка в файле модели COLMAP."""

    def __init__(self, file: str, line_no: int, message: str) -> None:
        self.file = file
        self.line_no = line_no
        super().__init__(f"{file}:{line_no}: {message}")


class ColmapConsistencyError(MvassocError):
    """Нарушена связь трек <-> ключевая точка (висячая ссылка и т.п.)."""


class DuplicateKeyError(MvassocError):
    """Повтор идентификатора (3D-точка, изображение, запись детекций)."""


class MaskFormatError(MvassocError):
    """Некорректная запись маски в файле детекций."""


class DimensionError(MvassocError):
    """Маски разного размера сравнивать нельзя."""


class GtFormatError(MvassocError):
    """Ошибка в CSV с GT-боксами."""


class SceneSpecError(MvassocError):
    """Некорректная или вырожденная синтетическая сцена."""


class ConfigError(MvassocError):
    """Параметры запуска нарушают жёсткие ограничения."""


class ExportError(MvassocError):
    """Ошибка подготовки выгрузки (PLY / треки)."""


# ---------------------------------------------------------------------------
# Общие типы
# ---------------------------------------------------------------------------

class MaskRef(NamedTuple):
    """Ссылка на маску: имя изображения + порядковый номер маски в нём."""
    image_name: str
    mask_id: int


# ---------------------------------------------------------------------------
# Параллельность
# ---------------------------------------------------------------------------

def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """
    Применить fn к элементам, сохранив порядок результатов.

    При workers <= 1 работает обычным циклом: результат не зависит от числа потоков.

    :param fn: чистая функция от одного элемента
    :param items: входные элементы
    :param workers: число потоков (по умолчанию MVASSOC_WORKERS)
    :return: список результатов в порядке items
    """
    seq = list(items)
    n = settings.WORKERS if workers is None else workers
    if n <= 1 or len(seq) <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, seq))


__all__ = [
    "logger",
    "configure_logging",
    "MvassocError",
    "ColmapParseError",
    "ColmapConsistencyError",
    "DuplicateKeyError",
    "MaskFormatError",
    "DimensionError",
    "GtFormatError",
    "SceneSpecError",
    "ConfigError",
    "ExportError",
    "MaskRef",
    "parallel_map",
]
