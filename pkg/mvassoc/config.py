"""
mvassoc.config
==============

Параметры запуска (RunConfig) и их источники.

Порядок применения:
    значения по умолчанию (settings) -> TOML-файл (--config) -> флаги CLI.

Формат TOML:
    [association]  tau_j, tau_m, n_min
    [detections]   min_score, label
    [baseline]     tau_iou, matcher
    [evaluation]   tau_eval
    [run]          seed, workers

Особенности:
- неизвестная секция или ключ — ConfigError (опечатка не должна молча
  превращаться в значение по умолчанию);
- жёсткие ограничения (0 < tau <= 1, n_min >= 0, 0 <= min_score <= 1,
  workers >= 1) — ConfigError;
- выход за рекомендуемый диапазон — только предупреждение в лог.
"""

from __future__ import annotations

import logging
import sys
if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10
    import tomli as tomllib
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Final, List, Optional

from mvassoc import settings
from mvassoc.association import AssociationConfig
from mvassoc.baseline_tracker import MATCHERS
from mvassoc.core import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    """Все параметры одного запуска."""
    tau_j: float = settings.DEFAULT_TAU_J
    tau_m: float = settings.DEFAULT_TAU_M
    n_min: int = settings.DEFAULT_N_MIN
    min_score: float = settings.DEFAULT_MIN_SCORE
    label: Optional[str] = settings.DEFAULT_LABEL
    tau_iou: float = settings.DEFAULT_TAU_IOU
    matcher: str = settings.DEFAULT_MATCHER
    tau_eval: float = settings.DEFAULT_TAU_EVAL
    seed: int = settings.DEFAULT_SEED
    workers: int = settings.WORKERS

    def association(self) -> AssociationConfig:
        return AssociationConfig(tau_j=self.tau_j, tau_m=self.tau_m, n_min=self.n_min)

    def as_dict(self) -> Dict[str, Any]:
        return asdict(self)


# Секция TOML -> допустимые ключи
SECTIONS: Final[Dict[str, tuple]] = {
    "association": ("tau_j", "tau_m", "n_min"),
    "detections": ("min_score", "label"),
    "baseline": ("tau_iou", "matcher"),
    "evaluation": ("tau_eval",),
    "run": ("seed", "workers"),
}

# Поле -> ожидаемый тип значения
_TYPES: Final[Dict[str, type]] = {
    "tau_j": float,
    "tau_m": float,
    "n_min": int,
    "min_score": float,
    "label": str,
    "tau_iou": float,
    "matcher": str,
    "tau_eval": float,
    "seed": int,
    "workers": int,
}


# ---------------------------------------------------------------------------
# Проверки
# ---------------------------------------------------------------------------

def _coerce(key: str, value: Any) -> Any:
    """Привести значение из TOML/CLI к типу поля; bool не считается числом."""
    if value is None:
        return None
    if isinstance(value, bool):
        raise ConfigError(f"{key}: ожидалось число или строка, получено {value!r}")
    kind = _TYPES[key]
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: ожидалась строка, получено {value!r}")
        return value
    if isinstance(value, float) and kind is int and not value.is_integer():
        raise ConfigError(f"{key}: ожидалось целое, получено {value!r}")
    try:
        return kind(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: некорректное значение {value!r}") from e


def validate_config(cfg: RunConfig) -> None:
    """Жёсткие ограничения; нарушение — ConfigError."""
    for key in ("tau_j", "tau_m", "tau_iou", "tau_eval"):
        value = getattr(cfg, key)
        if not 0.0 < value <= 1.0:
            raise ConfigError(f"{key} должен быть в (0, 1], получено {value}")
    if cfg.n_min < 0:
        raise ConfigError(f"n_min должен быть >= 0, получено {cfg.n_min}")
    if not 0.0 <= cfg.min_score <= 1.0:
        raise ConfigError(f"min_score должен быть в [0, 1], получено {cfg.min_score}")
    if cfg.workers < 1:
        raise ConfigError(f"workers должен быть >= 1, получено {cfg.workers}")
    if cfg.matcher not in MATCHERS:
        raise ConfigError(f"неизвестный matcher {cfg.matcher!r}, доступны: {sorted(MATCHERS)}")


def check_ranges(cfg: RunConfig) -> List[str]:
    """
    Сравнить параметры с рекомендуемыми диапазонами.

    :return: список предупреждений (каждое также пишется в лог)
    """
    warnings: List[str] = []
    for key, (low, high) in settings.RECOMMENDED_RANGES.items():
        value = getattr(cfg, key)
        if not low <= value <= high:
            msg = f"{key}={value} вне рекомендуемого диапазона [{low}, {high}]"
            warnings.append(msg)
            logger.warning("CONFIG: %s", msg)
    return warnings


# ---------------------------------------------------------------------------
# Источники значений
# ---------------------------------------------------------------------------

def load_run_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    """
    Прочитать RunConfig из TOML поверх base (по умолчанию — значения settings).

    :raises ConfigError: синтаксис TOML, неизвестная секция/ключ, некорректное значение
    """
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: некорректный TOML: {e}") from e

    values: Dict[str, Any] = {}
    for section, table in data.items():
        allowed = SECTIONS.get(section)
        if allowed is None or not isinstance(table, dict):
            raise ConfigError(f"{path}: неизвестная секция [{section}]")
        for key, value in table.items():
            if key not in allowed:
                raise ConfigError(f"{path}: неизвестный ключ {section}.{key}")
            values[key] = _coerce(key, value)

    cfg = replace(base or RunConfig(), **values)
    validate_config(cfg)
    logger.debug("CONFIG: %s -> %s", path, cfg)
    return cfg


def apply_overrides(cfg: RunConfig, **flags: Any) -> RunConfig:
    """
    Применить флаги CLI: None означает «оставить как есть».

    :raises ConfigError: неизвестный параметр или нарушение ограничений
    """
    unknown = sorted(set(flags) - set(_TYPES))
    if unknown:
        raise ConfigError(f"неизвестные параметры: {', '.join(unknown)}")
    changes = {k: _coerce(k, v) for k, v in flags.items() if v is not None}
    out = replace(cfg, **changes) if changes else cfg
    validate_config(out)
    return out


def resolve_config(path=None, **flags: Any) -> RunConfig:
    """Значения по умолчанию -> файл -> флаги, с проверкой диапазонов."""
    cfg = load_run_config(path) if path else RunConfig()
    cfg = apply_overrides(cfg, **flags)
    check_ranges(cfg)
    return cfg


__all__ = [
    "RunConfig",
    "SECTIONS",
    "validate_config",
    "check_ranges",
    "load_run_config",
    "apply_overrides",
    "resolve_config",
]
