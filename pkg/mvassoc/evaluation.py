"""
mvassoc/evaluation.py
=====================

Отвечает за:
- загрузку GT-боксов (CSV) и их запись;
- чтение предсказаний в общей JSON-схеме инстансов;
- метрики Coverage / Adjusted Coverage с глобальным сопоставлением
  предсказанных инстансов и GT-идентификаторов;
- выгрузку отчёта: JSON, текстовая таблица (rich), CSV по инстансам.

Правила подсчёта:
- предсказанный инстанс p совпадает с GT g в кадре f, если хотя бы одна
  маска p в кадре f даёт IoU охватывающего бокса с боксом g >= tau_eval;
- сопоставление p <-> g взаимно однозначное и максимизирует суммарное
  число совпавших кадров (linear_sum_assignment);
- missed_seg(g) — кадры g, где НИ ОДНА маска детектора не достигает
  IoU >= tau_eval с боксом g;
- coverage = matched / total, adjusted = matched / (total - missed_seg);
  при нулевом знаменателе adjusted = 1, инстанс помечается vacuous и
  исключается из средних.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table
from scipy.optimize import linear_sum_assignment

from mvassoc import settings
from mvassoc.core import ConfigError, GtFormatError, MaskFormatError, MaskRef
from mvassoc.masks import DetectionSet, bounding_box

logger = logging.getLogger(__name__)

Box = Tuple[int, int, int, int]
GT_HEADER = ["frame", "gt_id", "x_min", "y_min", "x_max", "y_max"]


# ---------------------------------------------------------------------------
# Типы
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GtBox:
    """GT-бокс одного здания в одном кадре (пиксели, включительно)."""
    frame: str
    gt_id: int
    box: Box


@dataclass(frozen=True)
class PredictedInstance:
    instance_id: int
    members: Tuple[MaskRef, ...]


@dataclass(frozen=True)
class InstanceScore:
    gt_id: int
    total_frames: int
    matched_frames: int
    missed_seg_frames: int
    coverage: float
    adjusted_coverage: float
    vacuous: bool = False
    instance_id: Optional[int] = None


@dataclass(frozen=True)
class EvaluationReport:
    """
    Итог оценки.

    mean_* — невзвешенные средние по GT-инстансам (vacuous исключены из
    mean_adjusted_coverage); weighted_* — средние, взвешенные по кадрам.
    None — усреднять нечего.
    """
    per_instance: Tuple[InstanceScore, ...]
    mean_coverage: Optional[float]
    mean_adjusted_coverage: Optional[float]
    weighted_coverage: Optional[float]
    weighted_adjusted_coverage: Optional[float]
    id_mapping: Dict[int, int] = field(default_factory=dict)
    tau_eval: float = settings.DEFAULT_TAU_EVAL
    warnings: Tuple[str, ...] = ()

    def score(self, gt_id: int) -> Optional[InstanceScore]:
        for s in self.per_instance:
            if s.gt_id == gt_id:
                return s
        return None


# ---------------------------------------------------------------------------
# GT CSV
# ---------------------------------------------------------------------------

def load_gt(path) -> List[GtBox]:
    """
    Прочитать CSV с заголовком frame,gt_id,x_min,y_min,x_max,y_max.

    :raises GtFormatError: битая строка (с номером строки), перевёрнутый бокс,
        повтор пары (frame, gt_id)
    """
    boxes: List[GtBox] = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != GT_HEADER:
            raise GtFormatError(f"{path}:1: ожидался заголовок {','.join(GT_HEADER)}")
        for row in reader:
            line_no = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(GT_HEADER):
                raise GtFormatError(f"{path}:{line_no}: ожидалось 6 полей, получено {len(row)}")
            frame = row[0].strip()
            try:
                gt_id, x0, y0, x1, y1 = (int(cell) for cell in row[1:])
            except ValueError as e:
                raise GtFormatError(f"{path}:{line_no}: нечисловое поле: {row!r}") from e
            if not frame:
                raise GtFormatError(f"{path}:{line_no}: пустое имя кадра")
            if x0 > x1 or y0 > y1:
                raise GtFormatError(f"{path}:{line_no}: перевёрнутый бокс ({x0}, {y0}, {x1}, {y1})")
            if (frame, gt_id) in seen:
                raise GtFormatError(f"{path}:{line_no}: повтор бокса для gt_id={gt_id} в кадре {frame}")
            seen.add((frame, gt_id))
            boxes.append(GtBox(frame, gt_id, (x0, y0, x1, y1)))
    logger.info("GT: %s — %d боксов, %d инстансов", path, len(boxes), len({b.gt_id for b in boxes}))
    return boxes


def save_gt(boxes: Sequence[GtBox], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(GT_HEADER)
        for b in boxes:
            writer.writerow([b.frame, b.gt_id, *b.box])


# ---------------------------------------------------------------------------
# Предсказания
# ---------------------------------------------------------------------------

def predictions_from_payload(payload: Mapping) -> List[PredictedInstance]:
    """Инстансы из JSON-схемы association / baseline_tracker."""
    try:
        return [
            PredictedInstance(
                int(inst["id"]),
                tuple(MaskRef(str(name), int(mask_id)) for name, mask_id in inst["masks"]),
            )
            for inst in payload["instances"]
        ]
    except (KeyError, TypeError, ValueError) as e:
        raise MaskFormatError(f"некорректная схема предсказаний: {e}") from e


def read_predictions(path) -> Tuple[List[PredictedInstance], Optional[dict]]:
    """
    Инстансы и записанные фильтры детекций ({"min_score", "label"}) из файла.

    Фильтры пишет associate / baseline; в файлах без них возвращается None.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as e:
            raise MaskFormatError(f"{path}: некорректный JSON: {e}") from e
    filters = payload.get("detections") if isinstance(payload, dict) else None
    if filters is not None and not isinstance(filters, dict):
        raise MaskFormatError(f"{path}: 'detections' должен быть объектом")
    return predictions_from_payload(payload), filters


def load_predictions(path) -> List[PredictedInstance]:
    return read_predictions(path)[0]


# ---------------------------------------------------------------------------
# Метрики
# ---------------------------------------------------------------------------

def box_iou(a: Box, b: Box) -> float:
    """IoU двух боксов в пикселях, границы включительно."""
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def _frame_boxes(dets: DetectionSet) -> Dict[str, Dict[int, Box]]:
    return {
        name: {m.mask_id: bounding_box(m) for m in det.masks}
        for name, det in dets.images.items()
    }


def _best_total(counts: np.ndarray) -> int:
    if counts.size == 0:
        return 0
    rows, cols = linear_sum_assignment(counts, maximize=True)
    return int(counts[rows, cols].sum())


def _mapping(counts: np.ndarray, gt_ids: List[int], inst_ids: List[int]) -> Dict[int, int]:
    """
    Оптимальное p -> g по матрице counts[g, p] с детерминированным выбором
    среди равных по сумме назначений.

    GT обходятся по возрастанию gt_id; каждый берёт инстанс с наибольшим
    числом совпавших кадров, при котором оптимум суммы ещё достижим.
    Равные по счёту инстансы различаются порядком столбцов: по содержимому
    столбца (по убыванию), затем по меньшему instance_id. Номер инстанса
    решает только между одинаковыми столбцами, поэтому перенумерация
    предсказаний не меняет оценок.
    """
    if counts.size == 0:
        return {}
    order = sorted(range(len(inst_ids)), key=lambda j: (tuple(-counts[:, j]), inst_ids[j]))
    canon = counts[:, order]
    best = _best_total(canon)

    free = list(range(canon.shape[1]))
    fixed = 0
    mapping: Dict[int, int] = {}
    for r in range(canon.shape[0]):
        rest = canon[r + 1:]
        candidates = sorted((c for c in free if canon[r, c] > 0), key=lambda c: (-canon[r, c], c))
        for c in candidates:
            others = [k for k in free if k != c]
            if fixed + int(canon[r, c]) + _best_total(rest[:, others]) == best:
                mapping[inst_ids[order[c]]] = gt_ids[r]
                fixed += int(canon[r, c])
                free = others
                break
        # ни один кандидат не сохраняет оптимум: g остаётся без инстанса
    return mapping


def evaluate(
    predictions: Sequence[PredictedInstance],
    dets: DetectionSet,
    gt: Sequence[GtBox],
    tau_eval: float = settings.DEFAULT_TAU_EVAL,
) -> EvaluationReport:
    """
    Посчитать Coverage / Adjusted Coverage для каждого GT-инстанса.

    :raises ConfigError: tau_eval вне (0, 1]
    :raises MaskFormatError: предсказание ссылается на маску, которой нет в dets
    """
    if not 0.0 < tau_eval <= 1.0:
        raise ConfigError(f"tau_eval должен быть в (0, 1], получено {tau_eval}")

    boxes = _frame_boxes(dets)
    # frame -> instance_id -> боксы масок инстанса в этом кадре
    members_by_frame: Dict[str, Dict[int, List[Box]]] = {}
    for inst in predictions:
        for ref in inst.members:
            frame_boxes = boxes.get(ref.image_name, {})
            if ref.mask_id not in frame_boxes:
                raise MaskFormatError(f"инстанс {inst.instance_id}: маски {ref} нет в детекциях")
            members_by_frame.setdefault(ref.image_name, {}).setdefault(inst.instance_id, []).append(
                frame_boxes[ref.mask_id]
            )

    warnings: List[str] = []
    unknown = sorted({b.frame for b in gt if b.frame not in dets.images})
    for frame in unknown:
        msg = f"GT ссылается на кадр {frame}, которого нет в детекциях"
        warnings.append(msg)
        logger.warning("EVAL: %s", msg)

    gt_ids = sorted({b.gt_id for b in gt})
    inst_ids = sorted({inst.instance_id for inst in predictions})
    g_index = {g: i for i, g in enumerate(gt_ids)}
    p_index = {p: j for j, p in enumerate(inst_ids)}

    counts = np.zeros((len(gt_ids), len(inst_ids)), dtype=np.int64)
    matches: Dict[Tuple[str, int], set] = {}
    total: Dict[int, int] = {g: 0 for g in gt_ids}
    missed: Dict[int, int] = {g: 0 for g in gt_ids}

    for b in gt:
        total[b.gt_id] += 1
        if not any(box_iou(mb, b.box) >= tau_eval for mb in boxes.get(b.frame, {}).values()):
            missed[b.gt_id] += 1
        hit = {
            iid
            for iid, inst_boxes in members_by_frame.get(b.frame, {}).items()
            if any(box_iou(mb, b.box) >= tau_eval for mb in inst_boxes)
        }
        matches[(b.frame, b.gt_id)] = hit
        for iid in hit:
            counts[g_index[b.gt_id], p_index[iid]] += 1

    id_mapping = _mapping(counts, gt_ids, inst_ids)
    inst_of_gt = {g: p for p, g in id_mapping.items()}

    scores: List[InstanceScore] = []
    for g in gt_ids:
        p = inst_of_gt.get(g)
        matched = int(counts[g_index[g], p_index[p]]) if p is not None else 0
        denom = total[g] - missed[g]
        vacuous = denom == 0
        scores.append(InstanceScore(
            gt_id=g,
            total_frames=total[g],
            matched_frames=matched,
            missed_seg_frames=missed[g],
            coverage=matched / total[g],
            adjusted_coverage=1.0 if vacuous else matched / denom,
            vacuous=vacuous,
            instance_id=p,
        ))

    non_vacuous = [s for s in scores if not s.vacuous]
    sum_total = sum(s.total_frames for s in scores)
    sum_adj = sum(s.total_frames - s.missed_seg_frames for s in scores)
    sum_matched = sum(s.matched_frames for s in scores)
    report = EvaluationReport(
        per_instance=tuple(scores),
        mean_coverage=float(np.mean([s.coverage for s in scores])) if scores else None,
        mean_adjusted_coverage=(
            float(np.mean([s.adjusted_coverage for s in non_vacuous])) if non_vacuous else None
        ),
        weighted_coverage=sum_matched / sum_total if sum_total else None,
        weighted_adjusted_coverage=sum_matched / sum_adj if sum_adj else None,
        id_mapping=dict(sorted(id_mapping.items())),
        tau_eval=tau_eval,
        warnings=tuple(warnings),
    )
    logger.info(
        "EVAL: GT-инстансов %d, предсказаний %d, mean coverage=%s, mean adjusted=%s",
        len(gt_ids), len(inst_ids), report.mean_coverage, report.mean_adjusted_coverage,
    )
    return report


# ---------------------------------------------------------------------------
# Выгрузка отчёта
# ---------------------------------------------------------------------------

def report_payload(report: EvaluationReport) -> dict:
    payload = asdict(report)
    payload["per_instance"] = [asdict(s) for s in report.per_instance]
    payload["id_mapping"] = {str(p): g for p, g in report.id_mapping.items()}
    payload["warnings"] = list(report.warnings)
    return payload


def save_report(report: EvaluationReport, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report_payload(report), fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.3f}"


def render_table(report: EvaluationReport) -> str:
    """Отчёт в виде выровненной текстовой таблицы (без цвета)."""
    table = Table(title=f"Coverage (tau_eval={report.tau_eval})")
    for name in ("gt_id", "instance", "frames", "matched", "missed_seg", "coverage", "adjusted"):
        table.add_column(name, justify="right")
    for s in report.per_instance:
        table.add_row(
            str(s.gt_id),
            "-" if s.instance_id is None else str(s.instance_id),
            str(s.total_frames),
            str(s.matched_frames),
            str(s.missed_seg_frames),
            _fmt(s.coverage),
            _fmt(s.adjusted_coverage) + (" *" if s.vacuous else ""),
        )
    table.add_section()
    table.add_row("mean", "", "", "", "", _fmt(report.mean_coverage), _fmt(report.mean_adjusted_coverage))
    table.add_row(
        "weighted", "", "", "", "", _fmt(report.weighted_coverage), _fmt(report.weighted_adjusted_coverage)
    )

    buf = io.StringIO()
    console = Console(file=buf, width=100, color_system=None, force_terminal=False)
    console.print(table)
    for msg in report.warnings:
        console.print(f"warning: {msg}", markup=False)
    return buf.getvalue()


def save_instance_csv(report: EvaluationReport, path) -> None:
    """CSV по инстансам (данные для столбчатых диаграмм)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([
            "gt_id", "instance_id", "total_frames", "matched_frames",
            "missed_seg_frames", "coverage", "adjusted_coverage", "vacuous",
        ])
        for s in report.per_instance:
            writer.writerow([
                s.gt_id, "" if s.instance_id is None else s.instance_id,
                s.total_frames, s.matched_frames, s.missed_seg_frames,
                f"{s.coverage:.6f}", f"{s.adjusted_coverage:.6f}", int(s.vacuous),
            ])


__all__ = [
    "GtBox",
    "PredictedInstance",
    "InstanceScore",
    "EvaluationReport",
    "load_gt",
    "save_gt",
    "predictions_from_payload",
    "read_predictions",
    "load_predictions",
    "box_iou",
    "evaluate",
    "report_payload",
    "save_report",
    "render_table",
    "save_instance_csv",
]
