"""
mvassoc/synth.py
================

Генератор синтетической сцены «улица с домами» с известной разметкой.
Нужен как оракул: на нём проверяется весь конвейер без реальных данных.

Геометрия:
- камера-обскура, поворот единичный, f = W/2, главная точка в центре кадра;
- ось Y мира направлена вниз, дома стоят в полосе Z ∈ [20, 21];
- дом b занимает X ∈ [b*14, b*14 + 8], Y ∈ [-10, 0];
- последовательность s проезжает вдоль улицы на высоте 1.5 + 0.5*s
  и со сдвигом назад 2*s (разные точки обзора), нечётные — в обратную сторону.

Дом даёт маску в кадре, если в кадр попадает хотя бы половина его
наблюдаемых точек. Ключевые точки создаются только для таких домов.

Искажения (все управляются SceneSpec и rng_seed):
- гауссов шум пикселей; вышедшие за кадр ключевые точки отбрасываются;
- track_dropout: ключевая точка теряет связь с 3D-точкой;
- wrong_track_rate: связь переводится на случайную точку другого дома
  (пиксель остаётся на месте);
- miss_rate: маска не попадает в детекции, GT-бокс остаётся;
- split_building: дом виден двумя непересекающимися группами
  последовательностей с общей частью точек.
"""

from __future__ import annotations

import json
import logging
import sys
if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10
    import tomli as tomllib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mvassoc.baseline_tracker import save_frame_order
from mvassoc.colmap_model import ImageRecord, Keypoint2D, Point3D, Reconstruction, write_model
from mvassoc.core import MaskRef, SceneSpecError
from mvassoc.evaluation import GtBox, save_gt
from mvassoc.masks import DetectionSet, ImageDetections, InstanceMask, bounding_box, encode, save_detections

logger = logging.getLogger(__name__)

BUILDING_WIDTH = 8.0
BUILDING_GAP = 6.0
BUILDING_HEIGHT = 10.0
STREET_DEPTH = (20.0, 21.0)
CAMERA_MARGIN = 4.0
MIN_VISIBLE_FRACTION = 0.5
REGION_RADIUS = 3
MASK_MODES = ("bbox-hull", "per-building-region")
SCORE_RANGE = (0.35, 1.0)
LABEL = "building"

MODEL_DIR = "model"
DETECTIONS_FILE = "detections.json"
GT_FILE = "gt.csv"
FRAMES_FILE = "frames.txt"
TRUTH_FILE = "truth.json"


# ---------------------------------------------------------------------------
# Параметры и истина
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneSpec:
    num_buildings: int = 10
    points_per_building: int = 200
    num_frames: int = 40
    num_sequences: int = 4
    image_size: Tuple[int, int] = (640, 480)
    keypoint_noise_sigma: float = 0.0
    track_dropout: float = 0.0
    wrong_track_rate: float = 0.0
    mask_mode: str = "bbox-hull"
    rng_seed: int = 0
    miss_rate: float = 0.0
    split_building: Optional[int] = None
    split_shared_fraction: float = 0.3
    split_view_fraction: float = 0.4

    def __post_init__(self) -> None:
        for name in ("num_buildings", "points_per_building", "num_frames", "num_sequences"):
            if getattr(self, name) <= 0:
                raise SceneSpecError(f"{name} должен быть > 0, получено {getattr(self, name)}")
        if self.num_frames < self.num_sequences:
            raise SceneSpecError(
                f"кадров ({self.num_frames}) меньше, чем последовательностей ({self.num_sequences})"
            )
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise SceneSpecError(f"некорректный размер изображения {self.image_size}")
        for name in ("track_dropout", "wrong_track_rate", "miss_rate",
                     "split_shared_fraction", "split_view_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise SceneSpecError(f"{name} должен быть в [0, 1], получено {value}")
        if self.keypoint_noise_sigma < 0:
            raise SceneSpecError(f"keypoint_noise_sigma < 0: {self.keypoint_noise_sigma}")
        if self.mask_mode not in MASK_MODES:
            raise SceneSpecError(f"mask_mode {self.mask_mode!r} не из {MASK_MODES}")
        if self.split_building is not None:
            if not 0 <= self.split_building < self.num_buildings:
                raise SceneSpecError(f"split_building={self.split_building} вне 0..{self.num_buildings - 1}")
            if self.num_sequences < 2:
                raise SceneSpecError("split_building требует хотя бы 2 последовательности")


@dataclass(frozen=True)
class SceneTruth:
    """Истинная разметка: точка -> дом, маска -> дом, GT-боксы, состав последовательностей."""
    point_building: Dict[int, int] = field(default_factory=dict)
    mask_building: Dict[MaskRef, int] = field(default_factory=dict)
    gt: Tuple[GtBox, ...] = ()
    sequences: Tuple[Tuple[str, ...], ...] = ()


def load_scene_spec(path) -> SceneSpec:
    """
    Прочитать SceneSpec из TOML: таблица [scene] или ключи верхнего уровня.

    :raises SceneSpecError: неизвестный ключ или недопустимое значение
    """
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise SceneSpecError(f"{path}: некорректный TOML: {e}") from e
    table = data.get("scene", data)
    known = {f.name for f in fields(SceneSpec)}
    unknown = sorted(set(table) - known)
    if unknown:
        raise SceneSpecError(f"{path}: неизвестные ключи сцены: {', '.join(unknown)}")
    values = dict(table)
    if "image_size" in values:
        values["image_size"] = tuple(values["image_size"])
    try:
        return SceneSpec(**values)
    except TypeError as e:
        raise SceneSpecError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# Геометрия
# ---------------------------------------------------------------------------

def _sequence_frames(num_frames: int, num_sequences: int) -> List[List[int]]:
    """Глобальные индексы кадров, разбитые на почти равные последовательности."""
    return [chunk.tolist() for chunk in np.array_split(np.arange(num_frames), num_sequences)]


def _camera_centers(spec: SceneSpec, sequences: List[List[int]]) -> Dict[int, Tuple[float, float, float]]:
    street_len = spec.num_buildings * (BUILDING_WIDTH + BUILDING_GAP) - BUILDING_GAP
    centers: Dict[int, Tuple[float, float, float]] = {}
    for s, frames in enumerate(sequences):
        n = len(frames)
        if n == 1:
            xs = [street_len / 2.0]
        else:
            xs = np.linspace(-CAMERA_MARGIN, street_len + CAMERA_MARGIN, n).tolist()
        if s % 2 == 1:
            xs = xs[::-1]
        for frame, x in zip(frames, xs):
            centers[frame] = (float(x), -1.5 - 0.5 * s, -2.0 * s)
    return centers


def _project(points: np.ndarray, center: Tuple[float, float, float], size: Tuple[int, int]):
    """Пиксельные координаты и признак попадания в кадр."""
    w, h = size
    f = w / 2.0
    rel = points - np.asarray(center)
    z = rel[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * rel[:, 0] / z + w / 2.0
        v = f * rel[:, 1] / z + h / 2.0
    in_frame = (z > 0.1) & (u >= 0) & (u < w) & (v >= 0) & (v < h)
    return u, v, in_frame


def _mask_array(us: np.ndarray, vs: np.ndarray, size: Tuple[int, int], mode: str) -> np.ndarray:
    w, h = size
    cols = np.floor(us).astype(np.int64)
    rows = np.floor(vs).astype(np.int64)
    arr = np.zeros((h, w), dtype=bool)
    if mode == "bbox-hull":
        arr[rows.min():rows.max() + 1, cols.min():cols.max() + 1] = True
        return arr
    for c, r in zip(cols.tolist(), rows.tolist()):
        arr[max(r - REGION_RADIUS, 0):r + REGION_RADIUS + 1, max(c - REGION_RADIUS, 0):c + REGION_RADIUS + 1] = True
    return arr


# ---------------------------------------------------------------------------
# Генерация
# ---------------------------------------------------------------------------

def generate(spec: SceneSpec) -> Tuple[Reconstruction, DetectionSet, List[GtBox], SceneTruth]:
    """
    Сгенерировать сцену.

    Возвращает:
        (Reconstruction, DetectionSet, GT-боксы, SceneTruth); при одинаковом
        rng_seed результат совпадает полностью.

    Исключения:
        SceneSpecError: какой-то дом не виден ни в одном кадре.
    """
    rng = np.random.default_rng(spec.rng_seed)
    nb, ppb = spec.num_buildings, spec.points_per_building
    size = spec.image_size
    width, height = size

    # Точки домов
    positions = np.empty((nb * ppb, 3), dtype=np.float64)
    for b in range(nb):
        x0 = b * (BUILDING_WIDTH + BUILDING_GAP)
        block = slice(b * ppb, (b + 1) * ppb)
        positions[block, 0] = rng.uniform(x0, x0 + BUILDING_WIDTH, ppb)
        positions[block, 1] = rng.uniform(-BUILDING_HEIGHT, 0.0, ppb)
        positions[block, 2] = rng.uniform(*STREET_DEPTH, ppb)
    base_colors = rng.integers(40, 216, size=(nb, 3))
    jitter = rng.integers(-20, 21, size=(nb * ppb, 3))
    colors = np.clip(np.repeat(base_colors, ppb, axis=0) + jitter, 0, 255)
    point_ids = np.arange(nb * ppb) + 1
    building_of = np.repeat(np.arange(nb), ppb)

    sequences = _sequence_frames(spec.num_frames, spec.num_sequences)
    seq_of_frame = {f: s for s, frames in enumerate(sequences) for f in frames}
    centers = _camera_centers(spec, sequences)

    # Разбиение дома на две группы обзора
    group_a: Optional[np.ndarray] = None
    group_b_only: Optional[np.ndarray] = None
    shared: Optional[np.ndarray] = None
    if spec.split_building is not None:
        idx = np.arange(spec.split_building * ppb, (spec.split_building + 1) * ppb)
        perm = rng.permutation(idx)
        n_shared = int(round(spec.split_shared_fraction * ppb))
        n_a = (ppb - n_shared) // 2
        exclusive_a, shared, group_b_only = perm[:n_a], perm[n_a:n_a + n_shared], perm[n_a + n_shared:]
        group_a = np.sort(np.concatenate([exclusive_a, shared]))
        shared = np.sort(shared)
        group_b_only = np.sort(group_b_only)
    first_half = (spec.num_sequences + 1) // 2

    keypoints_of: Dict[int, List[Keypoint2D]] = {}
    tracks: Dict[int, List[Tuple[int, int]]] = {}
    det_images: Dict[str, ImageDetections] = {}
    gt: List[GtBox] = []
    mask_building: Dict[MaskRef, int] = {}
    names: Dict[int, str] = {}
    seen_buildings = set()

    for frame in range(spec.num_frames):
        s = seq_of_frame[frame]
        image_id = frame + 1
        name = f"seq{s:02d}_frame{frame:04d}.jpg"
        names[frame] = name
        kps: List[Keypoint2D] = []
        masks: List[InstanceMask] = []

        for b in range(nb):
            if b == spec.split_building:
                if s < first_half:
                    candidates = group_a
                else:
                    take = rng.random(shared.size) < spec.split_view_fraction
                    candidates = np.sort(np.concatenate([group_b_only, shared[take]]))
            else:
                candidates = np.arange(b * ppb, (b + 1) * ppb)

            u, v, in_frame = _project(positions[candidates], centers[frame], size)
            if candidates.size == 0 or in_frame.mean() < MIN_VISIBLE_FRACTION:
                continue
            visible = candidates[in_frame]
            n = visible.size
            noise = rng.standard_normal((n, 2)) * spec.keypoint_noise_sigma
            drop = rng.random(n) < spec.track_dropout
            wrong = rng.random(n) < spec.wrong_track_rate
            other_building = rng.integers(0, max(nb - 1, 1), n)
            other_point = rng.integers(0, ppb, n)
            score = round(float(rng.uniform(*SCORE_RANGE)), 3)
            missed = bool(rng.random() < spec.miss_rate)

            us = u[in_frame] + noise[:, 0]
            vs = v[in_frame] + noise[:, 1]
            keep = (us >= 0) & (us < width) & (vs >= 0) & (vs < height)
            if not keep.any():
                continue
            seen_buildings.add(b)

            for k in np.flatnonzero(keep).tolist():
                pid: Optional[int] = int(point_ids[visible[k]])
                if drop[k]:
                    pid = None
                elif wrong[k] and nb > 1:
                    target_b = int(other_building[k])
                    if target_b >= b:
                        target_b += 1
                    pid = int(point_ids[target_b * ppb + int(other_point[k])])
                kp_idx = len(kps)
                kps.append(Keypoint2D(kp_idx, float(us[k]), float(vs[k]), pid))
                if pid is not None:
                    tracks.setdefault(pid, []).append((image_id, kp_idx))

            arr = _mask_array(us[keep], vs[keep], size, spec.mask_mode)
            mask = InstanceMask(
                image_name=name,
                mask_id=len(masks),
                label=LABEL,
                detection_score=score,
                width=width,
                height=height,
                rle=encode(arr),
                image_id=image_id,
            )
            gt.append(GtBox(name, b, bounding_box(mask)))
            if missed:
                continue
            masks.append(mask)
            mask_building[mask.ref] = b

        keypoints_of[image_id] = kps
        det_images[name] = ImageDetections(name, width, height, tuple(masks), image_id)

    never_seen = sorted(set(range(nb)) - seen_buildings)
    if never_seen:
        raise SceneSpecError(f"дома {never_seen} не видны ни в одном кадре")

    images = {
        frame + 1: ImageRecord(
            image_id=frame + 1,
            name=names[frame],
            camera_id=1,
            qvec=(1.0, 0.0, 0.0, 0.0),
            tvec=tuple(-c for c in centers[frame]),
            keypoints=tuple(keypoints_of[frame + 1]),
        )
        for frame in range(spec.num_frames)
    }
    sigma = float(spec.keypoint_noise_sigma)
    points3d: Dict[int, Point3D] = {}
    point_building: Dict[int, int] = {}
    for i in range(nb * ppb):
        pid = int(point_ids[i])
        track = tracks.get(pid)
        if not track:
            continue
        points3d[pid] = Point3D(
            id=pid,
            position=tuple(float(c) for c in positions[i]),
            color=tuple(int(c) for c in colors[i]),
            reproj_error=sigma,
            track=tuple(sorted(track)),
        )
        point_building[pid] = int(building_of[i])

    recon = Reconstruction(images=images, points3d=points3d)
    dets = DetectionSet(images=det_images)
    truth = SceneTruth(
        point_building=point_building,
        mask_building=mask_building,
        gt=tuple(gt),
        sequences=tuple(tuple(names[f] for f in frames) for frames in sequences),
    )
    logger.info(
        "SYNTH: домов %d, кадров %d, точек %d, масок %d, GT-боксов %d (seed=%d)",
        nb, spec.num_frames, len(points3d), len(dets), len(gt), spec.rng_seed,
    )
    return recon, dets, gt, truth


# ---------------------------------------------------------------------------
# Оракул
# ---------------------------------------------------------------------------

def oracle_partition(truth: SceneTruth) -> Dict[int, Tuple[MaskRef, ...]]:
    """Дом -> его маски (в порядке MaskRef)."""
    groups: Dict[int, List[MaskRef]] = {}
    for ref, b in sorted(truth.mask_building.items()):
        groups.setdefault(b, []).append(ref)
    return {b: tuple(refs) for b, refs in sorted(groups.items())}


def instance_buildings(instances, truth: SceneTruth) -> Dict[int, int]:
    """Инстанс -> дом большинства его масок (равенство — меньший индекс дома)."""
    out: Dict[int, int] = {}
    for inst in instances:
        votes: Dict[int, int] = {}
        for ref in inst.members:
            b = truth.mask_building.get(ref)
            if b is not None:
                votes[b] = votes.get(b, 0) + 1
        if votes:
            out[inst.instance_id] = min(votes, key=lambda b: (-votes[b], b))
    return out


def oracle_agreement(result, truth: SceneTruth) -> float:
    """
    Доля точек, чья метка указывает на инстанс их истинного дома.
    Неразмеченные точки считаются ошибкой.
    """
    if not truth.point_building:
        return 1.0
    building_of = instance_buildings(result.instances, truth)
    correct = sum(
        1
        for pid, b in truth.point_building.items()
        if pid in result.point_labels and building_of.get(result.point_labels[pid]) == b
    )
    return correct / len(truth.point_building)


def sequence_upper_bound(gt: Sequence[GtBox], sequences: Sequence[Sequence[str]]) -> Dict[int, float]:
    """
    Для каждого GT-инстанса — доля его кадров в самой длинной для него
    последовательности: потолок Coverage трекера, не связывающего последовательности.
    """
    seq_of = {name: s for s, names in enumerate(sequences) for name in names}
    per_gt: Dict[int, Dict[Optional[int], int]] = {}
    for b in gt:
        counter = per_gt.setdefault(b.gt_id, {})
        s = seq_of.get(b.frame)
        counter[s] = counter.get(s, 0) + 1
    return {g: max(c.values()) / sum(c.values()) for g, c in sorted(per_gt.items())}


# ---------------------------------------------------------------------------
# Запись сцены
# ---------------------------------------------------------------------------

def truth_payload(truth: SceneTruth) -> dict:
    return {
        "point_building": {str(pid): b for pid, b in sorted(truth.point_building.items())},
        "mask_building": [[ref.image_name, ref.mask_id, b] for ref, b in sorted(truth.mask_building.items())],
        "gt": [[g.frame, g.gt_id, *g.box] for g in truth.gt],
        "sequences": [list(seq) for seq in truth.sequences],
    }


def load_truth(path) -> SceneTruth:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return SceneTruth(
        point_building={int(k): int(v) for k, v in payload["point_building"].items()},
        mask_building={MaskRef(name, int(mid)): int(b) for name, mid, b in payload["mask_building"]},
        gt=tuple(GtBox(frame, int(g), (x0, y0, x1, y1)) for frame, g, x0, y0, x1, y1 in payload["gt"]),
        sequences=tuple(tuple(seq) for seq in payload["sequences"]),
    )


def write_scene(
    out_dir,
    recon: Reconstruction,
    dets: DetectionSet,
    gt: Sequence[GtBox],
    truth: SceneTruth,
) -> Dict[str, Path]:
    """Записать сцену в out_dir; возвращает пути созданных файлов."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = {
        "model": root / MODEL_DIR,
        "detections": root / DETECTIONS_FILE,
        "gt": root / GT_FILE,
        "frames": root / FRAMES_FILE,
        "truth": root / TRUTH_FILE,
    }
    write_model(recon, paths["model"])
    save_detections(dets, paths["detections"])
    save_gt(gt, paths["gt"])
    save_frame_order(truth.sequences, paths["frames"])
    with open(paths["truth"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(truth_payload(truth), fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    logger.info("SYNTH: сцена записана в %s", root)
    return paths


__all__ = [
    "SceneSpec",
    "SceneTruth",
    "load_scene_spec",
    "generate",
    "write_model",
    "oracle_partition",
    "instance_buildings",
    "oracle_agreement",
    "sequence_upper_bound",
    "truth_payload",
    "load_truth",
    "write_scene",
]
