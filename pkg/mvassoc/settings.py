"""
mvassoc/settings.py
===================

Глобальные настройки пакета.

Назначение:
- уровень логирования и число рабочих потоков читаются из окружения;
- значения параметров по умолчанию (середины рекомендованных диапазонов);
- рекомендованные диапазоны параметров: выход за них даёт предупреждение, не ошибку.

Примечание:
Пороговые значения можно переопределить TOML-конфигом или флагами CLI
(см. mvassoc/config.py).
"""

import os


# ---------------------------------------------------------------------------
# Окружение
# ---------------------------------------------------------------------------

LOG_LEVEL = os.getenv("MVASSOC_LOG_LEVEL", "INFO").upper()
WORKERS = int(os.getenv("MVASSOC_WORKERS", "1"))

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


# ---------------------------------------------------------------------------
# Ассоциация масок
# ---------------------------------------------------------------------------

DEFAULT_TAU_J = 0.20
DEFAULT_TAU_M = 0.15
DEFAULT_N_MIN = 10


# ---------------------------------------------------------------------------
# Детекции / базовый трекер / оценка
# ---------------------------------------------------------------------------

DEFAULT_MIN_SCORE = 0.3
DEFAULT_LABEL = None          # None: без фильтра по метке
DEFAULT_TAU_IOU = 0.5
DEFAULT_MATCHER = "greedy"
DEFAULT_TAU_EVAL = 0.5
DEFAULT_SEED = 0


# ---------------------------------------------------------------------------
# Рекомендованные диапазоны (включительно)
# ---------------------------------------------------------------------------

RECOMMENDED_RANGES = {
    "tau_j": (0.15, 0.30),
    "tau_m": (0.10, 0.25),
    "n_min": (5, 20),
    "min_score": (0.2, 0.5),
}

# Метка неразмеченных точек в PLY и её цвет
UNLABELED_ID = -1
UNLABELED_RGB = (128, 128, 128)
