"""
mvassoc/association.py
======================

Ядро: ассоциация масок между кадрами через общие 3D-точки.

Этапы (композиция в associate):
1) build_supports   — каждая маска получает множество id 3D-точек, чьи треки
                      проходят через ключевые точки внутри маски;
2) cluster_masks    — жадная кластеризация: затравка — маска с наибольшим
                      числом точек, присоединяются маски с J >= tau_j к текущему
                      множеству точек группы (множество растёт после каждого слияния);
3) merge_instances  — попарное слияние инстансов с J >= tau_m, после каждого
                      слияния перебор пар начинается заново;
4) filter_and_label — удаление инстансов с |P| <= n_min и назначение каждой
                      3D-точке одного инстанса по большинству масок.

Детерминизм:
- затравка: наибольшее |point_ids|, при равенстве — меньший (image_id, mask_id);
- порядок просмотра масок — (image_id, mask_id) по возрастанию;
- при равенстве голосов точка уходит инстансу с меньшим id.
"""

from __future__ import annotations

import json
import logging
import sys
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Set, Tuple

import numpy as np

from mvassoc import settings
from mvassoc.colmap_model import Reconstruction
from mvassoc.core import ConfigError, MaskRef, parallel_map
from mvassoc.masks import DetectionSet, ImageDetections, contains_many

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Типы
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentSupport:
    """3D-опора маски: id точек и число ключевых точек внутри маски."""
    mask_ref: MaskRef
    point_ids: FrozenSet[int]
    keypoint_count: int
    image_id: Optional[int] = None

    @property
    def order_key(self) -> Tuple[int, str, int]:
        # маски изображений вне реконструкции идут в конце
        image_id = sys.maxsize if self.image_id is None else self.image_id
        return image_id, self.mask_ref.image_name, self.mask_ref.mask_id


@dataclass(frozen=True)
class BuildingInstance:
    """Кластер масок и объединение их 3D-точек (P_B)."""
    instance_id: int
    members: Tuple[MaskRef, ...]
    points: FrozenSet[int]


@dataclass(frozen=True)
class AssociationConfig:
    """Пороги ассоциации."""
    tau_j: float = settings.DEFAULT_TAU_J
    tau_m: float = settings.DEFAULT_TAU_M
    n_min: int = settings.DEFAULT_N_MIN

    def __post_init__(self) -> None:
        if not 0.0 < self.tau_j <= 1.0:
            raise ConfigError(f"tau_j должен быть в (0, 1], получено {self.tau_j}")
        if not 0.0 < self.tau_m <= 1.0:
            raise ConfigError(f"tau_m должен быть в (0, 1], получено {self.tau_m}")
        if self.n_min < 0:
            raise ConfigError(f"n_min должен быть >= 0, получено {self.n_min}")


@dataclass(frozen=True)
class AssociationResult:
    """Итог: инстансы, метки точек, неприсвоенные маски."""
    instances: Tuple[BuildingInstance, ...] = ()
    point_labels: Dict[int, int] = field(default_factory=dict)
    unassigned_masks: Tuple[MaskRef, ...] = ()

    def instance(self, instance_id: int) -> Optional[BuildingInstance]:
        for inst in self.instances:
            if inst.instance_id == instance_id:
                return inst
        return None


# ---------------------------------------------------------------------------
# 3D-опоры масок
# ---------------------------------------------------------------------------

def _image_supports(recon: Reconstruction, det: ImageDetections) -> List[SegmentSupport]:
    img = recon.images.get(det.image_id) if det.image_id is not None else None
    if img is None or not img.keypoints:
        return [SegmentSupport(m.ref, frozenset(), 0, det.image_id) for m in det.masks]

    xs = np.fromiter((kp.x for kp in img.keypoints), dtype=np.float64, count=len(img.keypoints))
    ys = np.fromiter((kp.y for kp in img.keypoints), dtype=np.float64, count=len(img.keypoints))
    pids = np.fromiter(
        (-1 if kp.point3d_id is None else kp.point3d_id for kp in img.keypoints),
        dtype=np.int64, count=len(img.keypoints),
    )
    out: List[SegmentSupport] = []
    for m in det.masks:
        inside = contains_many(m, xs, ys)
        ids = pids[inside]
        out.append(SegmentSupport(
            mask_ref=m.ref,
            point_ids=frozenset(ids[ids >= 0].tolist()),
            keypoint_count=int(inside.sum()),
            image_id=det.image_id,
        ))
    return out


def build_supports(
    recon: Reconstruction,
    dets: DetectionSet,
    workers: Optional[int] = None,
) -> List[SegmentSupport]:
    """
    Поднять маски в 3D: по одной SegmentSupport на маску.

    Ключевая точка в k перекрывающихся масках попадает во все k опор.
    Маски изображений вне реконструкции получают пустую опору.

    :param recon: модель COLMAP
    :param dets: детекции с разрешёнными image_id
    :param workers: потоки для обработки изображений (результат от них не зависит)
    """
    per_image = parallel_map(lambda det: _image_supports(recon, det), dets.images.values(), workers)
    supports = [s for chunk in per_image for s in chunk]
    empty = sum(1 for s in supports if not s.point_ids)
    logger.info("ASSOC: опор %d, пустых %d", len(supports), empty)
    return supports


# ---------------------------------------------------------------------------
# Жаккар и кластеризация
# ---------------------------------------------------------------------------

def jaccard(a, b) -> float:
    """|a ∩ b| / |a ∪ b|; для двух пустых множеств — 0."""
    a = a if isinstance(a, (set, frozenset)) else set(a)
    b = b if isinstance(b, (set, frozenset)) else set(b)
    if not a and not b:
        return 0.0
    inter = len(a & b)
    return inter / (len(a) + len(b) - inter)


def cluster_masks(supports: Sequence[SegmentSupport], tau_j: float) -> List[BuildingInstance]:
    """
    Жадная кластеризация масок по 3D-Жаккару.

    Пока есть непристроенные маски с непустой опорой:
    затравка — наибольшая опора; проходы по остальным маскам в порядке
    (image_id, mask_id) присоединяют маски с J(опора, точки группы) >= tau_j,
    точки группы обновляются сразу; проходы повторяются, пока что-то присоединяется.
    Маски с пустой опорой в инстансы не попадают.

    :return: инстансы с id в порядке создания
    """
    pending = sorted((s for s in supports if s.point_ids), key=lambda s: s.order_key)
    instances: List[BuildingInstance] = []

    while pending:
        seed = min(pending, key=lambda s: (-len(s.point_ids), s.order_key))
        pending.remove(seed)
        members = [seed.mask_ref]
        points: Set[int] = set(seed.point_ids)

        changed = True
        while changed:
            changed = False
            rest: List[SegmentSupport] = []
            for s in pending:
                if jaccard(s.point_ids, points) >= tau_j:
                    members.append(s.mask_ref)
                    points |= s.point_ids
                    changed = True
                else:
                    rest.append(s)
            pending = rest

        instances.append(BuildingInstance(len(instances), tuple(members), frozenset(points)))
        logger.debug(
            "ASSOC: кластер %d — масок %d, точек %d",
            len(instances) - 1, len(members), len(points),
        )

    logger.info("ASSOC: кластеризация tau_j=%s — инстансов %d", tau_j, len(instances))
    return instances


def merge_instances(instances: Sequence[BuildingInstance], tau_m: float) -> List[BuildingInstance]:
    """
    Слияние инстансов по взаимному 3D-перекрытию.

    Перебор неупорядоченных пар (u < v) по возрастанию; на первой паре с
    J(P_u, P_v) >= tau_m обе заменяются объединением (на месте u) и перебор
    начинается заново; конец — полный проход без слияний. Затем id
    переназначаются 0..n-1 по убыванию |P| (при равенстве сохраняется порядок).

    Значения J кэшируются по номерам версий инстансов: повторный проход после
    слияния пересчитывает только пары с новым инстансом.
    """
    current: List[Tuple[int, BuildingInstance]] = list(enumerate(instances))
    next_token = len(current)
    cache: Dict[Tuple[int, int], float] = {}
    merges = 0

    def overlap(a: Tuple[int, BuildingInstance], b: Tuple[int, BuildingInstance]) -> float:
        key = (a[0], b[0])
        if key not in cache:
            cache[key] = jaccard(a[1].points, b[1].points)
        return cache[key]

    changed = True
    while changed:
        changed = False
        for u in range(len(current)):
            for v in range(u + 1, len(current)):
                if overlap(current[u], current[v]) >= tau_m:
                    a, b = current[u][1], current[v][1]
                    merged = BuildingInstance(a.instance_id, a.members + b.members, a.points | b.points)
                    current[u] = (next_token, merged)
                    next_token += 1
                    del current[v]
                    merges += 1
                    changed = True
                    break
            if changed:
                break

    ordered = sorted((inst for _, inst in current), key=lambda inst: -len(inst.points))
    result = [BuildingInstance(i, inst.members, inst.points) for i, inst in enumerate(ordered)]
    logger.info("ASSOC: слияние tau_m=%s — слияний %d, инстансов %d", tau_m, merges, len(result))
    return result


def filter_and_label(
    instances: Sequence[BuildingInstance],
    supports: Sequence[SegmentSupport],
    n_min: int,
) -> AssociationResult:
    """
    Отбросить малые инстансы (|P| <= n_min) и разметить точки большинством масок.

    Для каждой точки выбирается инстанс, в масках которого она встречается
    чаще всего; при равенстве — меньший instance_id.
    """
    by_ref = {s.mask_ref: s for s in supports}
    kept = [inst for inst in instances if len(inst.points) > n_min]
    dropped = len(instances) - len(kept)

    votes: Dict[int, Counter] = defaultdict(Counter)
    for inst in kept:
        for ref in inst.members:
            for pid in by_ref[ref].point_ids:
                votes[pid][inst.instance_id] += 1

    point_labels: Dict[int, int] = {}
    for pid in sorted(votes):
        tally = votes[pid]
        point_labels[pid] = min(tally, key=lambda iid: (-tally[iid], iid))

    assigned = {ref for inst in kept for ref in inst.members}
    unassigned = sorted((s for s in supports if s.mask_ref not in assigned), key=lambda s: s.order_key)
    logger.info(
        "ASSOC: n_min=%d — отброшено %d, осталось %d, точек размечено %d, масок без инстанса %d",
        n_min, dropped, len(kept), len(point_labels), len(unassigned),
    )
    return AssociationResult(
        instances=tuple(kept),
        point_labels=point_labels,
        unassigned_masks=tuple(s.mask_ref for s in unassigned),
    )


def associate(
    recon: Reconstruction,
    dets: DetectionSet,
    config: Optional[AssociationConfig] = None,
    workers: Optional[int] = None,
) -> AssociationResult:
    """Полный конвейер: опоры -> кластеры -> слияние -> фильтр и разметка."""
    cfg = config or AssociationConfig()
    supports = build_supports(recon, dets, workers=workers)
    clusters = cluster_masks(supports, cfg.tau_j)
    merged = merge_instances(clusters, cfg.tau_m)
    return filter_and_label(merged, supports, cfg.n_min)


# ---------------------------------------------------------------------------
# Сериализация
# ---------------------------------------------------------------------------

def result_payload(result: AssociationResult) -> dict:
    """
    JSON-схема результата (общая с базовым трекером):

        {"instances": [{"id": n, "masks": [["image_name", mask_id], ...], "num_points": n}],
         "point_labels": {"<point_id>": instance_id},
         "unassigned": [["image_name", mask_id], ...]}
    """
    return {
        "instances": [
            {
                "id": inst.instance_id,
                "masks": [[ref.image_name, ref.mask_id] for ref in inst.members],
                "num_points": len(inst.points),
            }
            for inst in result.instances
        ],
        "point_labels": {str(pid): iid for pid, iid in sorted(result.point_labels.items())},
        "unassigned": [[ref.image_name, ref.mask_id] for ref in result.unassigned_masks],
    }


def save_result(result: AssociationResult, path, detections: Optional[dict] = None) -> None:
    """
    Записать result_payload в JSON.

    detections — фильтры, с которыми загружались маски (min_score, label);
    mask_id в файле имеют смысл только при тех же фильтрах.
    """
    payload = result_payload(result)
    if detections is not None:
        payload["detections"] = dict(detections)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    logger.info("ASSOC: результат записан в %s", path)


__all__ = [
    "SegmentSupport",
    "BuildingInstance",
    "AssociationConfig",
    "AssociationResult",
    "build_supports",
    "jaccard",
    "cluster_masks",
    "merge_instances",
    "filter_and_label",
    "associate",
    "result_payload",
    "save_result",
]
