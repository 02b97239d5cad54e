"""
mvassoc/baseline_tracker.py
===========================

Наивный базовый трекер: маски связываются только с масками предыдущего кадра
по 2D IoU.

Правила:
- на каждой паре соседних кадров считаются все IoU «предыдущий × текущий»;
- пары принимаются по убыванию IoU (при равенстве — меньшая пара MaskRef),
  пока IoU >= tau_iou и обе стороны свободны (matcher="greedy");
  matcher="hungarian" — оптимальное назначение с тем же порогом;
- несопоставленная маска текущего кадра открывает новый трек;
- трек, пропустивший кадр, закрывается (повторного входа нет).

track_sequences гоняет трекер по каждой последовательности отдельно:
трек никогда не пересекает границу последовательности.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from mvassoc import settings
from mvassoc.core import ConfigError, DimensionError, MaskRef
from mvassoc.masks import InstanceMask, bounding_box, to_array

logger = logging.getLogger(__name__)

Frame = Tuple[int, Sequence[InstanceMask]]
Pair = Tuple[int, int]


# ---------------------------------------------------------------------------
# Типы
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Track2D:
    """Трек: упорядоченные (frame_index, MaskRef), по одной маске на кадр."""
    track_id: int
    entries: Tuple[Tuple[int, MaskRef], ...]


# ---------------------------------------------------------------------------
# IoU масок
# ---------------------------------------------------------------------------

def _boxes_disjoint(a: InstanceMask, b: InstanceMask) -> bool:
    ax0, ay0, ax1, ay1 = bounding_box(a)
    bx0, by0, bx1, by1 = bounding_box(b)
    return ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    """
    IoU двух масок по пикселям объекта.

    :raises DimensionError: у масок разный размер
    """
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionError(
            f"маски {a.ref} ({a.width}x{a.height}) и {b.ref} ({b.width}x{b.height}) разного размера"
        )
    if _boxes_disjoint(a, b):
        return 0.0
    fa, fb = to_array(a), to_array(b)
    union = np.logical_or(fa, fb).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(fa, fb).sum() / union)


# ---------------------------------------------------------------------------
# Сопоставление соседних кадров
# ---------------------------------------------------------------------------

def greedy_match(iou: np.ndarray, prev: Sequence[MaskRef], cur: Sequence[MaskRef], tau: float) -> List[Pair]:
    """Жадно по убыванию IoU; равенство — по меньшей паре (MaskRef пред., MaskRef тек.)."""
    candidates = [
        (-iou[i, j], prev[i], cur[j], i, j)
        for i in range(iou.shape[0])
        for j in range(iou.shape[1])
        if iou[i, j] >= tau
    ]
    candidates.sort()
    used_prev, used_cur = set(), set()
    pairs: List[Pair] = []
    for _, _, _, i, j in candidates:
        if i in used_prev or j in used_cur:
            continue
        used_prev.add(i)
        used_cur.add(j)
        pairs.append((i, j))
    return pairs


def hungarian_match(iou: np.ndarray, prev: Sequence[MaskRef], cur: Sequence[MaskRef], tau: float) -> List[Pair]:
    """Оптимальное назначение по сумме IoU; пары ниже порога отбрасываются."""
    if iou.size == 0:
        return []
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if iou[i, j] >= tau]


MATCHERS: Dict[str, Callable[..., List[Pair]]] = {
    "greedy": greedy_match,
    "hungarian": hungarian_match,
}


def _iou_matrix(prev: Sequence[InstanceMask], cur: Sequence[InstanceMask]) -> np.ndarray:
    mat = np.zeros((len(prev), len(cur)), dtype=np.float64)
    for i, a in enumerate(prev):
        for j, b in enumerate(cur):
            mat[i, j] = mask_iou(a, b)
    return mat


def track_iou(
    frames: Sequence[Frame],
    tau_iou: float = settings.DEFAULT_TAU_IOU,
    matcher: str = settings.DEFAULT_MATCHER,
) -> List[Track2D]:
    """
    Связать маски в треки по IoU с предыдущим кадром.

    Параметры:
        frames: [(frame_index, [маски кадра])] в порядке датасета.
        tau_iou: порог IoU, 0 < tau_iou <= 1.
        matcher: "greedy" (по умолчанию) или "hungarian".

    Возвращает:
        Треки с id 0..n-1 в порядке открытия; каждая маска ровно в одном треке.
    """
    if not 0.0 < tau_iou <= 1.0:
        raise ConfigError(f"tau_iou должен быть в (0, 1], получено {tau_iou}")
    match = MATCHERS.get(matcher)
    if match is None:
        raise ConfigError(f"неизвестный matcher {matcher!r}, доступны: {sorted(MATCHERS)}")

    tracks: List[List[Tuple[int, MaskRef]]] = []
    prev_masks: List[InstanceMask] = []
    prev_tracks: List[int] = []
    last_index = None

    for frame_index, masks in frames:
        if last_index is not None and frame_index <= last_index:
            raise ConfigError(f"индексы кадров должны возрастать: {frame_index} после {last_index}")
        last_index = frame_index
        cur = list(masks)
        cur_tracks = [-1] * len(cur)

        if prev_masks and cur:
            iou = _iou_matrix(prev_masks, cur)
            pairs = match(iou, [m.ref for m in prev_masks], [m.ref for m in cur], tau_iou)
            for i, j in pairs:
                cur_tracks[j] = prev_tracks[i]
                tracks[prev_tracks[i]].append((frame_index, cur[j].ref))

        for j, m in enumerate(cur):
            if cur_tracks[j] < 0:
                cur_tracks[j] = len(tracks)
                tracks.append([(frame_index, m.ref)])

        prev_masks, prev_tracks = cur, cur_tracks

    result = [Track2D(tid, tuple(entries)) for tid, entries in enumerate(tracks)]
    logger.info("BASELINE: кадров %d, треков %d (tau_iou=%s, %s)", len(frames), len(result), tau_iou, matcher)
    return result


def track_sequences(
    sequences: Sequence[Sequence[Frame]],
    tau_iou: float = settings.DEFAULT_TAU_IOU,
    matcher: str = settings.DEFAULT_MATCHER,
) -> List[Track2D]:
    """Трекинг по каждой последовательности отдельно, id треков сквозные."""
    out: List[Track2D] = []
    for frames in sequences:
        for t in track_iou(frames, tau_iou, matcher):
            out.append(Track2D(len(out), t.entries))
    return out


# ---------------------------------------------------------------------------
# Порядок кадров и сериализация
# ---------------------------------------------------------------------------

def load_frame_order(path) -> List[List[str]]:
    """
    Прочитать файл порядка кадров: одно имя в строке, пустая строка — граница
    последовательности. Пустые последовательности не возвращаются.
    """
    sequences: List[List[str]] = [[]]
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            name = raw.strip()
            if not name:
                if sequences[-1]:
                    sequences.append([])
                continue
            sequences[-1].append(name)
    return [seq for seq in sequences if seq]


def save_frame_order(sequences: Sequence[Sequence[str]], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n\n".join("\n".join(seq) for seq in sequences if seq))
        fh.write("\n")


def tracks_payload(tracks: Sequence[Track2D]) -> dict:
    """Треки в общей JSON-схеме инстансов (без 3D-точек)."""
    return {
        "instances": [
            {
                "id": t.track_id,
                "masks": [[ref.image_name, ref.mask_id] for _, ref in t.entries],
                "num_points": 0,
            }
            for t in tracks
        ],
        "point_labels": {},
        "unassigned": [],
    }


__all__ = [
    "Track2D",
    "mask_iou",
    "greedy_match",
    "hungarian_match",
    "MATCHERS",
    "track_iou",
    "track_sequences",
    "load_frame_order",
    "save_frame_order",
    "tracks_payload",
]
