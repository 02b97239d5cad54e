"""
mvassoc.commands
================

Обработчики подкоманд CLI. Каждая функция cmd_* возвращает код выхода:
    0 — успех;
    2 — ошибка входных данных (MvassocError) или файловой системы (OSError);
    1 — непредвиденная ошибка (пишется в лог с трассировкой).

Подкоманды:
- associate — ассоциация масок по 3D-трекам + PLY + треки;
- baseline  — наивный IoU-трекер по порядку кадров;
- evaluate  — Coverage / Adjusted Coverage против GT;
- synth     — синтетическая сцена с известной разметкой.

Сводка печатается таблицей (rich) или одной JSON-строкой при as_json=True.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from rich.console import Console
from rich.table import Table

from mvassoc.association import associate, save_result
from mvassoc.baseline_tracker import load_frame_order, track_sequences, tracks_payload
from mvassoc.colmap_model import parse_model, validate
from mvassoc.config import RunConfig
from mvassoc.core import ConfigError, MvassocError
from mvassoc.evaluation import (
    evaluate,
    load_gt,
    read_predictions,
    render_table,
    report_payload,
    save_instance_csv,
    save_report,
)
from mvassoc.export import export_ply, export_tracks
from mvassoc.masks import DetectionSet, load_detections
from mvassoc.synth import SceneSpec, generate, load_scene_spec, write_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INPUT_ERROR = 2

RESULT_FILE = "result.json"
PLY_FILE = "cloud.ply"
TRACKS_FILE = "tracks.json"
BASELINE_FILE = "baseline.json"
REPORT_FILE = "report.json"
INSTANCE_CSV_FILE = "per_instance.csv"


# ---------------------------------------------------------------------------
# Общая обвязка
# ---------------------------------------------------------------------------

def _command(fn: Callable[..., Dict[str, Any]]) -> Callable[..., int]:
    """
    Обернуть обработчик: сводка -> stdout, ошибки -> лог + stderr + код выхода.

    Обработчик возвращает словарь-сводку; ключ "_text" (если есть) печатается
    вместо таблицы в обычном режиме.
    """
    @functools.wraps(fn)
    def wrapper(*args: Any, as_json: bool = False, **kwargs: Any) -> int:
        try:
            summary = fn(*args, **kwargs)
        except (MvassocError, OSError) as e:
            logger.error("%s: %s", fn.__name__, e)
            print(f"error: {e}", file=sys.stderr)
            return EXIT_INPUT_ERROR
        except Exception as e:  # noqa: BLE001
            logger.exception("%s: непредвиденная ошибка", fn.__name__)
            print(f"unexpected error: {e}", file=sys.stderr)
            return EXIT_UNEXPECTED

        text = summary.pop("_text", None)
        if as_json:
            print(json.dumps(summary, ensure_ascii=False, sort_keys=True))
        elif text is not None:
            print(text, end="")
        else:
            _print_summary(fn.__name__.removeprefix("cmd_"), summary)
        return EXIT_OK

    return wrapper


def _print_summary(title: str, summary: Dict[str, Any]) -> None:
    table = Table(title=title, show_header=False)
    table.add_column("key")
    table.add_column("value", justify="right")
    for key, value in summary.items():
        table.add_row(key, str(value))
    Console(file=sys.stdout, color_system=None).print(table)


def _out_dir(path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _filters(cfg: RunConfig) -> Dict[str, Any]:
    """Фильтры загрузки детекций; от них зависит нумерация mask_id."""
    return {"min_score": cfg.min_score, "label": cfg.label}


def _check_filters(recorded: Optional[Dict[str, Any]], cfg: RunConfig, path) -> None:
    if recorded is None:
        return
    if recorded.get("min_score") != cfg.min_score or recorded.get("label") != cfg.label:
        raise ConfigError(
            f"{path}: предсказания построены с min_score={recorded.get('min_score')}, "
            f"label={recorded.get('label')!r}, а оценка идёт с min_score={cfg.min_score}, "
            f"label={cfg.label!r}; mask_id не совпадут"
        )


# ---------------------------------------------------------------------------
# associate
# ---------------------------------------------------------------------------

@_command
def cmd_associate(
    model_dir,
    detections_path,
    out_dir,
    config: Optional[RunConfig] = None,
    ply_color: str = "instance-palette",
    ply_instance: Optional[int] = None,
) -> Dict[str, Any]:
    """Реконструкция + детекции -> result.json, cloud.ply, tracks.json."""
    cfg = config or RunConfig()
    recon = parse_model(model_dir)
    dets = load_detections(
        detections_path, cfg.min_score, image_ids=recon.name_index(), label=cfg.label
    )
    result = associate(recon, dets, cfg.association(), workers=cfg.workers)

    root = _out_dir(out_dir)
    # PLY первым: неизвестный инстанс в single-instance не оставляет полувыгрузки
    export_ply(recon, result, root / PLY_FILE, color_mode=ply_color, instance_id=ply_instance)
    save_result(result, root / RESULT_FILE, detections=_filters(cfg))
    export_tracks(result, dets, root / TRACKS_FILE, detections=_filters(cfg))

    return {
        "instances": len(result.instances),
        "points_labeled": len(result.point_labels),
        "points_total": len(recon.points3d),
        "masks_total": len(dets),
        "masks_unassigned": len(result.unassigned_masks),
        "images_unmatched": len(dets.unmatched),
        "ply_color": ply_color,
        "out_dir": str(root),
    }


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _frames_for(dets: DetectionSet, order: Optional[List[List[str]]]) -> List[List[Tuple[int, list]]]:
    """
    Разложить детекции по последовательностям из файла порядка.

    Кадры из файла без детекций остаются пустыми кадрами (они рвут треки);
    изображения детекций, которых нет в файле, идут в конец отдельной
    последовательностью в порядке файла детекций.
    """
    if order is None:
        order = [list(dets.images)]
    listed = {name for seq in order for name in seq}
    extra = [name for name in dets.images if name not in listed]
    if extra:
        logger.warning("BASELINE: %d изображений нет в файле порядка кадров, добавлены в конец", len(extra))
        order = [*order, extra]

    sequences = []
    index = 0
    for seq in order:
        frames = []
        for name in seq:
            det = dets.images.get(name)
            frames.append((index, list(det.masks) if det is not None else []))
            index += 1
        sequences.append(frames)
    return sequences


@_command
def cmd_baseline(
    detections_path,
    frame_order_path,
    out_dir,
    config: Optional[RunConfig] = None,
) -> Dict[str, Any]:
    """Детекции + порядок кадров -> baseline.json в общей схеме инстансов."""
    cfg = config or RunConfig()
    dets = load_detections(detections_path, cfg.min_score, label=cfg.label)
    order = load_frame_order(frame_order_path) if frame_order_path else None
    sequences = _frames_for(dets, order)
    tracks = track_sequences(sequences, cfg.tau_iou, cfg.matcher)

    root = _out_dir(out_dir)
    path = root / BASELINE_FILE
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        payload = {**tracks_payload(tracks), "detections": _filters(cfg)}
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    logger.info("BASELINE: треки записаны в %s", path)

    return {
        "tracks": len(tracks),
        "masks_total": len(dets),
        "sequences": len(sequences),
        "out_dir": str(root),
    }


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@_command
def cmd_evaluate(
    predictions_path,
    detections_path,
    gt_path,
    out_dir=None,
    config: Optional[RunConfig] = None,
) -> Dict[str, Any]:
    """Предсказания + детекции + GT -> отчёт (таблица, report.json, per_instance.csv)."""
    cfg = config or RunConfig()
    predictions, recorded = read_predictions(predictions_path)
    _check_filters(recorded, cfg, predictions_path)
    dets = load_detections(detections_path, cfg.min_score, label=cfg.label)
    gt = load_gt(gt_path)
    report = evaluate(predictions, dets, gt, cfg.tau_eval)

    if out_dir is not None:
        root = _out_dir(out_dir)
        save_report(report, root / REPORT_FILE)
        save_instance_csv(report, root / INSTANCE_CSV_FILE)

    summary = report_payload(report)
    summary["_text"] = render_table(report)
    return summary


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

@_command
def cmd_synth(spec_path, out_dir, seed: Optional[int] = None) -> Dict[str, Any]:
    """SceneSpec (TOML) -> model/, detections.json, gt.csv, frames.txt, truth.json."""
    spec = load_scene_spec(spec_path) if spec_path else SceneSpec()
    if seed is not None:
        spec = replace(spec, rng_seed=seed)
    recon, dets, gt, truth = generate(spec)
    violations = validate(recon)
    if violations:
        raise MvassocError(f"сгенерированная модель несогласована: {violations[0]}")
    paths = write_scene(out_dir, recon, dets, gt, truth)

    return {
        "buildings": spec.num_buildings,
        "images": len(recon.images),
        "points": len(recon.points3d),
        "masks": len(dets),
        "gt_boxes": len(gt),
        "seed": spec.rng_seed,
        "out_dir": str(Path(out_dir)),
        "model_dir": str(paths["model"]),
    }


__all__ = [
    "EXIT_OK",
    "EXIT_UNEXPECTED",
    "EXIT_INPUT_ERROR",
    "cmd_associate",
    "cmd_baseline",
    "cmd_evaluate",
    "cmd_synth",
]
