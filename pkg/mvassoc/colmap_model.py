"""
mvassoc/colmap_model.py
=======================

Работа с текстовой моделью COLMAP (images.txt / points3D.txt).

Отвечает за:
- разбор файлов модели в неизменяемую Reconstruction;
- проверку двунаправленной согласованности треков (validate);
- запись модели обратно в текст (write_model) — побайтово воспроизводимо.

Формат:
- строки, начинающиеся с '#', — комментарии;
- images.txt: по две строки на изображение — заголовок
  `IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME` и плоский список троек `X Y POINT3D_ID`;
- points3D.txt: `POINT3D_ID X Y Z R G B ERROR` + пары `IMAGE_ID POINT2D_IDX`;
- POINT3D_ID = -1 означает «нет 3D-точки»;
- cameras.txt допускается, но не читается (проекция не выполняется).

Важно:
- Point2D_ID — позиционный индекс ключевой точки в строке изображения.
- Бинарный формат (.bin) не поддерживается.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from mvassoc.core import (
    ColmapConsistencyError,
    ColmapParseError,
    DuplicateKeyError,
    parallel_map,
)

logger = logging.getLogger(__name__)

IMAGES_FILE = "images.txt"
POINTS_FILE = "points3D.txt"
NO_POINT3D = -1
QUATERNION_TOL = 1e-6


# --------------------------------------------------------------------------- #
# Типы
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Keypoint2D:
    """Ключевая точка изображения; point3d_id=None — точка не реконструирована."""
    point2d_index: int
    x: float
    y: float
    point3d_id: Optional[int] = None


@dataclass(frozen=True)
class Point3D:
    """3D-точка с треком наблюдений [(image_id, point2d_index), ...]."""
    id: int
    position: Tuple[float, float, float]
    color: Tuple[int, int, int]
    reproj_error: float
    track: Tuple[Tuple[int, int], ...]


@dataclass(frozen=True)
class ImageRecord:
    """Зарегистрированное изображение: поза + ключевые точки."""
    image_id: int
    name: str
    camera_id: int
    qvec: Tuple[float, float, float, float]
    tvec: Tuple[float, float, float]
    keypoints: Tuple[Keypoint2D, ...] = ()


@dataclass(frozen=True)
class Reconstruction:
    """
    Разобранная модель SfM.

    После создания не изменяется — безопасно делить между потоками.
    """
    images: Dict[int, ImageRecord] = field(default_factory=dict)
    points3d: Dict[int, Point3D] = field(default_factory=dict)

    def name_index(self) -> Dict[str, int]:
        """Имя изображения -> image_id."""
        return {img.name: img.image_id for img in self.images.values()}

    def num_observations(self) -> int:
        return sum(len(p.track) for p in self.points3d.values())


# --------------------------------------------------------------------------- #
# Разбор строк
# --------------------------------------------------------------------------- #
def _data_lines(path: Path):
    """Пары (номер строки, текст) без хвостовых пробелов и перевода строки."""
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            yield line_no, raw.rstrip()


def _is_skipped(text: str) -> bool:
    s = text.strip()
    return not s or s.startswith("#")


def _parse_keypoints(fname: str, line_no: int, text: str) -> Tuple[Keypoint2D, ...]:
    elems = text.split()
    if len(elems) % 3 != 0:
        raise ColmapParseError(
            fname, line_no, f"ожидались тройки X Y POINT3D_ID, полей: {len(elems)}"
        )
    if not elems:
        return ()
    try:
        xs = np.asarray(elems[0::3], dtype=np.float64)
        ys = np.asarray(elems[1::3], dtype=np.float64)
        pids = np.asarray(elems[2::3], dtype=np.int64)
    except ValueError as e:
        raise ColmapParseError(fname, line_no, f"не число: {e}") from e
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise ColmapParseError(fname, line_no, "координаты ключевых точек не конечны")
    return tuple(
        Keypoint2D(idx, x, y, None if pid == NO_POINT3D else pid)
        for idx, (x, y, pid) in enumerate(zip(xs.tolist(), ys.tolist(), pids.tolist()))
    )


def _read_images(path: Path) -> Dict[int, ImageRecord]:
    fname = path.name
    images: Dict[int, ImageRecord] = {}
    lines = _data_lines(path)
    for line_no, text in lines:
        if _is_skipped(text):
            continue
        elems = text.split(maxsplit=9)
        if len(elems) != 10:
            raise ColmapParseError(
                fname, line_no, f"заголовок изображения: ожидалось 10 полей, получено {len(elems)}"
            )
        try:
            image_id = int(elems[0])
            qvec = tuple(float(v) for v in elems[1:5])
            tvec = tuple(float(v) for v in elems[5:8])
            camera_id = int(elems[8])
        except ValueError as e:
            raise ColmapParseError(fname, line_no, f"не число: {e}") from e
        name = elems[9]

        # Вторая строка изображения может быть пустой (нет ключевых точек) или отсутствовать в конце файла
        kp_line_no, kp_text = next(lines, (line_no + 1, ""))
        keypoints = _parse_keypoints(fname, kp_line_no, kp_text)

        if image_id in images:
            raise DuplicateKeyError(f"{fname}:{line_no}: повтор IMAGE_ID={image_id}")
        images[image_id] = ImageRecord(image_id, name, camera_id, qvec, tvec, keypoints)
    logger.info("COLMAP: %s — изображений %d", fname, len(images))
    return images


def _read_points(path: Path) -> Dict[int, Point3D]:
    fname = path.name
    points: Dict[int, Point3D] = {}
    for line_no, text in _data_lines(path):
        if _is_skipped(text):
            continue
        elems = text.split()
        if len(elems) < 8 or (len(elems) - 8) % 2 != 0:
            raise ColmapParseError(
                fname, line_no, f"ожидалось 8 полей + пары трека, получено {len(elems)}"
            )
        try:
            pid = int(elems[0])
            position = tuple(float(v) for v in elems[1:4])
            color = tuple(int(v) for v in elems[4:7])
            error = float(elems[7])
            flat = [int(v) for v in elems[8:]]
        except ValueError as e:
            raise ColmapParseError(fname, line_no, f"не число: {e}") from e
        if not all(math.isfinite(v) for v in position):
            raise ColmapParseError(fname, line_no, "координаты точки не конечны")
        if not all(0 <= c <= 255 for c in color):
            raise ColmapParseError(fname, line_no, f"цвет вне 0..255: {color}")
        if not (math.isfinite(error) and error >= 0):
            raise ColmapParseError(fname, line_no, f"ошибка репроекции некорректна: {error}")
        if pid in points:
            raise DuplicateKeyError(f"{fname}:{line_no}: повтор POINT3D_ID={pid}")
        track = tuple(zip(flat[0::2], flat[1::2]))
        points[pid] = Point3D(pid, position, color, error, track)
    logger.info("COLMAP: %s — точек %d", fname, len(points))
    return points


# --------------------------------------------------------------------------- #
# Проверка согласованности
# --------------------------------------------------------------------------- #
def _check_dangling(images: Dict[int, ImageRecord], points: Dict[int, Point3D]) -> None:
    """Трек не может ссылаться на отсутствующее изображение или индекс ключевой точки."""
    for p in points.values():
        for image_id, kp_idx in p.track:
            img = images.get(image_id)
            if img is None:
                raise ColmapConsistencyError(
                    f"точка {p.id}: трек ссылается на отсутствующее изображение {image_id}"
                )
            if not 0 <= kp_idx < len(img.keypoints):
                raise ColmapConsistencyError(
                    f"точка {p.id}: трек ссылается на ключевую точку {kp_idx} изображения "
                    f"{image_id}, а их всего {len(img.keypoints)}"
                )


def validate(recon: Reconstruction) -> List[str]:
    """
    Проверить все инварианты модели.

    :param recon: модель
    :return: список нарушений (пустой — модель согласована); каждое называет id
    """
    violations: List[str] = []
    seen: Dict[Tuple[int, int], int] = {}

    for img in recon.images.values():
        norm = math.sqrt(sum(q * q for q in img.qvec))
        if abs(norm - 1.0) > QUATERNION_TOL:
            violations.append(f"изображение {img.image_id}: норма кватерниона {norm!r} != 1")
        for pos, kp in enumerate(img.keypoints):
            if kp.point2d_index != pos:
                violations.append(
                    f"изображение {img.image_id}: ключевая точка на позиции {pos} "
                    f"имеет индекс {kp.point2d_index}"
                )
            if not (math.isfinite(kp.x) and math.isfinite(kp.y)):
                violations.append(f"изображение {img.image_id}: ключевая точка {pos} не конечна")
            if kp.point3d_id is not None and kp.point3d_id not in recon.points3d:
                violations.append(
                    f"изображение {img.image_id}: ключевая точка {pos} ссылается "
                    f"на отсутствующую точку {kp.point3d_id}"
                )

    for p in recon.points3d.values():
        if not p.track:
            violations.append(f"точка {p.id}: пустой трек")
        if not (math.isfinite(p.reproj_error) and p.reproj_error >= 0):
            violations.append(f"точка {p.id}: ошибка репроекции {p.reproj_error!r}")
        for image_id, kp_idx in p.track:
            pair = (image_id, kp_idx)
            if pair in seen:
                violations.append(
                    f"точка {p.id}: наблюдение (изображение {image_id}, ключевая точка {kp_idx}) "
                    f"уже занято точкой {seen[pair]}"
                )
            else:
                seen[pair] = p.id
            img = recon.images.get(image_id)
            if img is None or not 0 <= kp_idx < len(img.keypoints):
                violations.append(
                    f"точка {p.id}: висячая ссылка трека (изображение {image_id}, ключевая точка {kp_idx})"
                )
                continue
            kp = img.keypoints[kp_idx]
            if kp.point3d_id != p.id:
                violations.append(
                    f"точка {p.id}: (изображение {image_id}, ключевая точка {kp_idx}) "
                    f"ссылается на {kp.point3d_id}, а не на {p.id}"
                )

    # Обратное направление: ключевая точка -> трек её 3D-точки
    for img in recon.images.values():
        for kp in img.keypoints:
            if kp.point3d_id is None or kp.point3d_id not in recon.points3d:
                continue
            if seen.get((img.image_id, kp.point2d_index)) != kp.point3d_id:
                violations.append(
                    f"изображение {img.image_id}: ключевая точка {kp.point2d_index} "
                    f"отсутствует в треке точки {kp.point3d_id}"
                )
    return violations


# --------------------------------------------------------------------------- #
# Публичные операции
# --------------------------------------------------------------------------- #
def parse_model(dir_path) -> Reconstruction:
    """
    Разобрать текстовую модель COLMAP из каталога.

    Параметры:
        dir_path: каталог с images.txt и points3D.txt.

    Возвращает:
        Reconstruction, удовлетворяющую всем инвариантам.

    Исключения:
        FileNotFoundError: нет одного из файлов.
        ColmapParseError: битая строка (с именем файла и номером строки).
        DuplicateKeyError: повтор id.
        ColmapConsistencyError: висячие ссылки и прочие нарушения инвариантов.
    """
    root = Path(dir_path)
    for name in (IMAGES_FILE, POINTS_FILE):
        if not (root / name).is_file():
            raise FileNotFoundError(f"В модели нет файла {root / name}")

    # Файлы независимы: читаем параллельно, сверяем после
    images, points = parallel_map(
        lambda job: job[0](job[1]),
        [(_read_images, root / IMAGES_FILE), (_read_points, root / POINTS_FILE)],
        workers=2,
    )
    _check_dangling(images, points)
    recon = Reconstruction(images=images, points3d=points)

    violations = validate(recon)
    if violations:
        for v in violations[:20]:
            logger.error("COLMAP: %s", v)
        raise ColmapConsistencyError(
            f"модель {root} несогласована ({len(violations)} нарушений): {violations[0]}"
        )
    logger.info(
        "COLMAP: модель %s — %d изображений, %d точек, %d наблюдений",
        root, len(images), len(points), recon.num_observations(),
    )
    return recon


def _fmt(value: float) -> str:
    """Кратчайшее десятичное представление, однозначно читаемое обратно."""
    return repr(float(value))


def write_model(recon: Reconstruction, dir_path) -> None:
    """
    Записать модель в текстовом формате COLMAP.

    Повторный разбор даёт равную Reconstruction; write(parse(write(r))) == write(r) побайтово.

    :param recon: согласованная модель
    :param dir_path: каталог назначения (создаётся при необходимости)
    """
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)

    images = [recon.images[k] for k in sorted(recon.images)]
    n_obs = sum(1 for img in images for kp in img.keypoints if kp.point3d_id is not None)
    mean_obs = n_obs / len(images) if images else 0.0
    with open(root / IMAGES_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        fh.write(f"# Number of images: {len(images)}, mean observations per image: {mean_obs:.6f}\n")
        for img in images:
            head = [str(img.image_id), *map(_fmt, img.qvec), *map(_fmt, img.tvec),
                    str(img.camera_id), img.name]
            fh.write(" ".join(head) + "\n")
            fh.write(" ".join(
                f"{_fmt(kp.x)} {_fmt(kp.y)} {NO_POINT3D if kp.point3d_id is None else kp.point3d_id}"
                for kp in img.keypoints
            ) + "\n")

    points = [recon.points3d[k] for k in sorted(recon.points3d)]
    mean_track = recon.num_observations() / len(points) if points else 0.0
    with open(root / POINTS_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        fh.write(f"# Number of points: {len(points)}, mean track length: {mean_track:.6f}\n")
        for p in points:
            fields = [str(p.id), *map(_fmt, p.position), *map(str, p.color), _fmt(p.reproj_error)]
            fields += [f"{image_id} {kp_idx}" for image_id, kp_idx in p.track]
            fh.write(" ".join(fields) + "\n")

    logger.info("COLMAP: модель записана в %s (%d изображений, %d точек)", root, len(images), len(points))


__all__ = [
    "Keypoint2D",
    "Point3D",
    "ImageRecord",
    "Reconstruction",
    "parse_model",
    "validate",
    "write_model",
]
