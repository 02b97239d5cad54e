"""
mvassoc/export.py
=================

Выгрузка результатов:
- export_ply — ASCII PLY облака точек с цветом и instance_id на вершину;
- export_tracks — JSON с масками каждого инстанса по кадрам (данные для
  отрисовки оверлеев).

Режимы цвета PLY:
- "instance-palette": цвет по instance_id, неразмеченные точки серые;
- "original-rgb": исходные цвета точек;
- "single-instance": выбранный инстанс красный, остальные в исходных цветах.
"""

from __future__ import annotations

import colorsys
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from plyfile import PlyData, PlyElement

from mvassoc import settings
from mvassoc.association import AssociationResult
from mvassoc.colmap_model import Reconstruction
from mvassoc.core import ExportError, MaskRef
from mvassoc.masks import DetectionSet, bounding_box

logger = logging.getLogger(__name__)

RGB = Tuple[int, int, int]

COLOR_MODES = ("instance-palette", "original-rgb", "single-instance")
HIGHLIGHT_RGB: RGB = (255, 0, 0)
UNASSIGNED_KEY = "unassigned"

PALETTE: Tuple[RGB, ...] = (
    (174, 199, 232), (152, 223, 138), (31, 119, 180), (255, 187, 120),
    (188, 189, 34), (140, 86, 75), (255, 152, 150), (214, 39, 40),
    (197, 176, 213), (148, 103, 189), (196, 156, 148), (23, 190, 207),
    (247, 182, 210), (219, 219, 141), (255, 127, 14), (158, 218, 229),
    (44, 160, 44), (112, 128, 144), (227, 119, 194), (82, 84, 163),
)
GOLDEN_RATIO = 0.618033988749895

VERTEX_DTYPE = [
    ("x", "f4"), ("y", "f4"), ("z", "f4"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("instance_id", "i4"),
]


def palette_color(instance_id: int) -> RGB:
    """Цвет инстанса: фиксированная таблица, дальше — оттенки по золотому сечению."""
    if instance_id < 0:
        return settings.UNLABELED_RGB
    if instance_id < len(PALETTE):
        return PALETTE[instance_id]
    hue = (instance_id * GOLDEN_RATIO) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def _vertex_colors(
    recon: Reconstruction,
    ids: List[int],
    labels: np.ndarray,
    color_mode: str,
    instance_id: Optional[int],
) -> np.ndarray:
    original = np.array([recon.points3d[pid].color for pid in ids], dtype=np.int64).reshape(-1, 3)
    if color_mode == "original-rgb":
        return original
    if color_mode == "single-instance":
        colors = original.copy()
        colors[labels == instance_id] = HIGHLIGHT_RGB
        return colors
    lookup: Dict[int, RGB] = {iid: palette_color(iid) for iid in np.unique(labels).tolist()}
    return np.array([lookup[iid] for iid in labels.tolist()], dtype=np.int64).reshape(-1, 3)


def export_ply(
    recon: Reconstruction,
    result: AssociationResult,
    path,
    color_mode: str = "instance-palette",
    instance_id: Optional[int] = None,
) -> int:
    """
    Записать облако точек в ASCII PLY.

    Каждая 3D-точка реконструкции — ровно одна вершина (по возрастанию id);
    точки без метки получают instance_id = -1.

    :param color_mode: один из COLOR_MODES
    :param instance_id: инстанс для режима "single-instance"
    :return: число вершин
    :raises ExportError: неизвестный режим или инстанс
    """
    if color_mode not in COLOR_MODES:
        raise ExportError(f"неизвестный режим цвета {color_mode!r}, доступны: {COLOR_MODES}")
    if color_mode == "single-instance":
        if instance_id is None or result.instance(instance_id) is None:
            raise ExportError(f"инстанса {instance_id} нет в результате")

    ids = sorted(recon.points3d)
    labels = np.array(
        [result.point_labels.get(pid, settings.UNLABELED_ID) for pid in ids], dtype=np.int64
    )
    colors = _vertex_colors(recon, ids, labels, color_mode, instance_id)

    vertices = np.empty(len(ids), dtype=VERTEX_DTYPE)
    if ids:
        positions = np.array([recon.points3d[pid].position for pid in ids], dtype=np.float64)
        vertices["x"] = positions[:, 0].astype("f4")
        vertices["y"] = positions[:, 1].astype("f4")
        vertices["z"] = positions[:, 2].astype("f4")
        vertices["red"] = colors[:, 0].astype("u1")
        vertices["green"] = colors[:, 1].astype("u1")
        vertices["blue"] = colors[:, 2].astype("u1")
        vertices["instance_id"] = labels.astype("i4")

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(vertices, "vertex")], text=True).write(str(path))
    logger.info("EXPORT: PLY %s — вершин %d, режим %s", path, len(ids), color_mode)
    return len(ids)


# ---------------------------------------------------------------------------
# Треки
# ---------------------------------------------------------------------------

def _entries(refs, dets: DetectionSet) -> List[dict]:
    out = []
    for ref in sorted(refs):
        mask = dets.get(MaskRef(*ref))
        if mask is None:
            raise ExportError(f"маски {tuple(ref)} нет в детекциях")
        out.append({"image": mask.image_name, "mask_id": mask.mask_id, "bbox": list(bounding_box(mask))})
    return out


def tracks_export_payload(result: AssociationResult, dets: DetectionSet) -> dict:
    """
    {"instances": {"<id>": [{"image", "mask_id", "bbox"}, ...]}, "unassigned": [...]},
    записи упорядочены по имени изображения.
    """
    return {
        "instances": {
            str(inst.instance_id): _entries(inst.members, dets) for inst in result.instances
        },
        UNASSIGNED_KEY: _entries(result.unassigned_masks, dets),
    }


def export_tracks(
    result: AssociationResult,
    dets: DetectionSet,
    path,
    detections: Optional[dict] = None,
) -> None:
    payload = tracks_export_payload(result, dets)
    if detections is not None:
        payload["detections"] = dict(detections)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    logger.info("EXPORT: треки %s — инстансов %d", path, len(result.instances))


__all__ = [
    "COLOR_MODES",
    "PALETTE",
    "palette_color",
    "export_ply",
    "tracks_export_payload",
    "export_tracks",
]
