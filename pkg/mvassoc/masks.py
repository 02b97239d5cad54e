"""
mvassoc/masks.py
================

Маски инстанс-сегментации, полученные внешним детектором.

Содержит:
- InstanceMask / ImageDetections / DetectionSet — неизменяемые контейнеры;
- load_detections / save_detections — JSON-файл детекций;
- encode / decode — RLE по строкам (row-major), первый отрезок — фон;
- contains / contains_many — попадание (под)пиксельной точки в маску;
- bounding_box — минимальный охватывающий прямоугольник (включительно).

Формат файла детекций (UTF-8):
    {"images": [{"name": <имя как в images.txt>, "width": W, "height": H,
                 "masks": [{"label": "building", "score": 0.87, "rle": [..]}]}]}

Важно:
- фильтр по detection score применяется при загрузке, после него маски
  в изображении нумеруются 0..n-1 в порядке файла;
- маски могут перекрываться, взаимное исключение не навязывается.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from mvassoc import settings
from mvassoc.core import DuplicateKeyError, MaskFormatError, MaskRef

logger = logging.getLogger(__name__)

Box = Tuple[int, int, int, int]


# ---------------------------------------------------------------------------
# Типы
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceMask:
    """
    Бинарная маска одного инстанса.

    rle — длины чередующихся отрезков фон/объект по развёртке H×W по строкам.
    image_id — None, если имя изображения не найдено в реконструкции.
    """
    image_name: str
    mask_id: int
    label: str
    detection_score: float
    width: int
    height: int
    rle: Tuple[int, ...]
    image_id: Optional[int] = None

    @property
    def ref(self) -> MaskRef:
        return MaskRef(self.image_name, self.mask_id)

    @cached_property
    def _run_ends(self) -> np.ndarray:
        return np.cumsum(np.asarray(self.rle, dtype=np.int64))

    @property
    def area(self) -> int:
        return int(sum(self.rle[1::2]))


@dataclass(frozen=True)
class ImageDetections:
    """Детекции одного изображения."""
    name: str
    width: int
    height: int
    masks: Tuple[InstanceMask, ...] = ()
    image_id: Optional[int] = None


@dataclass(frozen=True)
class DetectionSet:
    """
    Все детекции: имя изображения -> ImageDetections (порядок файла).

    unmatched — имена изображений, которых нет в реконструкции.
    """
    images: Dict[str, ImageDetections] = field(default_factory=dict)
    unmatched: Tuple[str, ...] = ()

    def __len__(self) -> int:
        return sum(len(d.masks) for d in self.images.values())

    def masks(self) -> Iterator[InstanceMask]:
        for det in self.images.values():
            yield from det.masks

    def get(self, ref: MaskRef) -> Optional[InstanceMask]:
        det = self.images.get(ref.image_name)
        if det is None or not 0 <= ref.mask_id < len(det.masks):
            return None
        return det.masks[ref.mask_id]

    def by_image_id(self) -> Dict[int, ImageDetections]:
        return {d.image_id: d for d in self.images.values() if d.image_id is not None}


# ---------------------------------------------------------------------------
# RLE
# ---------------------------------------------------------------------------

def encode(mask: np.ndarray) -> Tuple[int, ...]:
    """
    Закодировать бинарную маску H×W в RLE (row-major, начиная с фона).

    :param mask: 2D-массив bool/0-1
    :return: длины отрезков; ведущий 0 — маска начинается с объекта
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return ()
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return tuple(int(c) for c in counts)


def decode(rle, width: int, height: int) -> np.ndarray:
    """
    Развернуть RLE в бинарную маску height×width.

    :raises MaskFormatError: сумма отрезков не равна width*height
    """
    counts = np.asarray(rle, dtype=np.int64)
    if counts.sum() != width * height:
        raise MaskFormatError(
            f"RLE: сумма отрезков {int(counts.sum())} != {width}x{height}"
        )
    values = np.arange(counts.size) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def to_array(mask: InstanceMask) -> np.ndarray:
    return decode(mask.rle, mask.width, mask.height)


# ---------------------------------------------------------------------------
# Геометрия маски
# ---------------------------------------------------------------------------

def contains_many(mask: InstanceMask, xs, ys) -> np.ndarray:
    """
    Векторная проверка попадания точек в маску.

    Точка (x, y) попадает, если пиксель (floor(x), floor(y)) внутри изображения
    и принадлежит объекту. Поиск идёт по кумулятивным длинам RLE без декодирования.

    :return: булев массив той же длины, что xs
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        cols = np.floor(xs)
        rows = np.floor(ys)
        inside = (
            np.isfinite(cols) & np.isfinite(rows)
            & (cols >= 0) & (rows >= 0)
            & (cols < mask.width) & (rows < mask.height)
        )
    result = np.zeros(xs.shape, dtype=bool)
    if not inside.any():
        return result
    flat = rows[inside].astype(np.int64) * mask.width + cols[inside].astype(np.int64)
    run = np.searchsorted(mask._run_ends, flat, side="right")
    result[inside] = run % 2 == 1
    return result


def contains(mask: InstanceMask, x: float, y: float) -> bool:
    """Попадает ли точка (x, y) в пикселях в маску; вне изображения — False."""
    if not (math.isfinite(x) and math.isfinite(y)):
        return False
    return bool(contains_many(mask, [x], [y])[0])


def bounding_box(mask: InstanceMask) -> Box:
    """
    Минимальный прямоугольник (x_min, y_min, x_max, y_max), включительно.

    Считается по отрезкам объекта: отрезок, переходящий через строку,
    занимает все столбцы.
    """
    counts = np.asarray(mask.rle, dtype=np.int64)
    ends = np.cumsum(counts)
    starts = ends - counts
    fg = (np.arange(counts.size) % 2 == 1) & (counts > 0)
    s, e = starts[fg], ends[fg] - 1
    if s.size == 0:
        raise MaskFormatError(f"маска {mask.ref} пуста")
    w = mask.width
    row_s, row_e = s // w, e // w
    col_s, col_e = s % w, e % w
    single = row_s == row_e
    x_min = int(np.where(single, col_s, 0).min())
    x_max = int(np.where(single, col_e, w - 1).max())
    return x_min, int(row_s.min()), x_max, int(row_e.max())


# ---------------------------------------------------------------------------
# Загрузка / сохранение
# ---------------------------------------------------------------------------

def _validated_rle(raw, name: str, index: int, width: int, height: int) -> Tuple[int, ...]:
    # bool в JSON (true/false) тоже int в Python, длиной серии не считается
    if not isinstance(raw, list) or not all(
        isinstance(c, int) and not isinstance(c, bool) and c >= 0 for c in raw
    ):
        raise MaskFormatError(f"изображение {name}, маска #{index}: rle должен быть списком целых >= 0")
    total = sum(raw)
    if total != width * height:
        raise MaskFormatError(
            f"изображение {name}, маска #{index}: сумма rle {total} != {width}x{height}"
        )
    return tuple(raw)


def load_detections(
    path,
    min_score: float = settings.DEFAULT_MIN_SCORE,
    *,
    image_ids: Optional[Mapping[str, int]] = None,
    label: Optional[str] = None,
) -> DetectionSet:
    """
    Загрузить файл детекций.

    Параметры:
        path: путь к JSON.
        min_score: маски со score < min_score отбрасываются.
        image_ids: имя -> image_id из реконструкции; неизвестные имена попадают в unmatched.
        label: если задан — оставить только маски с точно такой меткой.

    Возвращает:
        DetectionSet; маски в изображении пронумерованы 0..n-1 после фильтрации.

    Исключения:
        MaskFormatError: несоответствие длины RLE, score вне [0, 1], битая структура.
        DuplicateKeyError: изображение встречается дважды.
    """
    if not 0.0 <= min_score <= 1.0:
        raise MaskFormatError(f"min_score вне [0, 1]: {min_score}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise MaskFormatError(f"{path}: некорректный JSON: {e}") from e
    if not isinstance(payload, dict) or not isinstance(payload.get("images"), list):
        raise MaskFormatError(f"{path}: ожидался объект с ключом 'images'")

    images: Dict[str, ImageDetections] = {}
    unmatched: List[str] = []
    dropped = 0
    for entry in payload["images"]:
        try:
            name = str(entry["name"])
            width = int(entry["width"])
            height = int(entry["height"])
            raw_masks = entry.get("masks", [])
        except (KeyError, TypeError, ValueError) as e:
            raise MaskFormatError(f"{path}: некорректная запись изображения: {entry!r}") from e
        if not isinstance(raw_masks, list):
            raise MaskFormatError(f"{path}: изображение {name}: masks должен быть списком")
        if name in images:
            raise DuplicateKeyError(f"{path}: изображение {name} встречается дважды")

        image_id = None
        if image_ids is not None:
            image_id = image_ids.get(name)
            if image_id is None:
                unmatched.append(name)
                logger.warning("DETS: изображение %s не найдено в реконструкции", name)

        kept: List[InstanceMask] = []
        for index, m in enumerate(raw_masks):
            if not isinstance(m, dict):
                raise MaskFormatError(f"изображение {name}, маска #{index}: ожидался объект, получено {m!r}")
            rle = _validated_rle(m.get("rle"), name, index, width, height)
            try:
                score = float(m.get("score", 1.0))
            except (TypeError, ValueError) as e:
                raise MaskFormatError(f"изображение {name}, маска #{index}: score не число") from e
            if not 0.0 <= score <= 1.0:
                raise MaskFormatError(f"изображение {name}, маска #{index}: score {score} вне [0, 1]")
            mask_label = str(m.get("label", ""))
            if score < min_score or (label is not None and mask_label != label):
                dropped += 1
                continue
            if sum(rle[1::2]) == 0:
                logger.warning("DETS: изображение %s, маска #%d пустая, пропущена", name, index)
                dropped += 1
                continue
            kept.append(InstanceMask(
                image_name=name,
                mask_id=len(kept),
                label=mask_label,
                detection_score=score,
                width=width,
                height=height,
                rle=rle,
                image_id=image_id,
            ))
        images[name] = ImageDetections(name, width, height, tuple(kept), image_id)

    dets = DetectionSet(images=images, unmatched=tuple(unmatched))
    logger.info(
        "DETS: %s — изображений %d, масок %d (отброшено %d, min_score=%s)",
        path, len(images), len(dets), dropped, min_score,
    )
    return dets


def save_detections(dets: DetectionSet, path) -> None:
    """Записать DetectionSet в JSON-формат load_detections."""
    payload = {
        "images": [
            {
                "name": det.name,
                "width": det.width,
                "height": det.height,
                "masks": [
                    {"label": m.label, "score": m.detection_score, "rle": list(m.rle)}
                    for m in det.masks
                ],
            }
            for det in dets.images.values()
        ]
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")
    logger.info("DETS: записано %d масок в %s", len(dets), path)


__all__ = [
    "InstanceMask",
    "ImageDetections",
    "DetectionSet",
    "encode",
    "decode",
    "to_array",
    "contains",
    "contains_many",
    "bounding_box",
    "load_detections",
    "save_detections",
]
