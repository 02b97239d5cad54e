"""
cli.py
======

Главная точка входа mvassoc.

Что делает:
- настраивает логирование (MVASSOC_LOG_LEVEL, -v/--verbose);
- регистрирует подкоманды associate / baseline / evaluate / synth;
- собирает RunConfig: значения по умолчанию -> --config (TOML) -> флаги;
- передаёт управление обработчику из mvassoc.commands и возвращает его код выхода.

Примеры:
    python cli.py synth --spec scene.toml out/scene
    python cli.py associate out/scene/model out/scene/detections.json out/assoc
    python cli.py associate out/scene/model out/scene/detections.json out/one --ply-color single-instance --ply-instance 3
    python cli.py baseline out/scene/detections.json --frames out/scene/frames.txt out/base
    python cli.py evaluate out/assoc/result.json out/scene/detections.json out/scene/gt.csv
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, List, Optional

from mvassoc import commands
from mvassoc.config import RunConfig, resolve_config
from mvassoc.core import ConfigError, configure_logging
from mvassoc.export import COLOR_MODES

log = logging.getLogger("mvassoc.cli")


# ---------------------------------------------------------------------------
# Общие флаги
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML-файл с параметрами запуска")
    p.add_argument("--json", action="store_true", dest="as_json", help="сводка одной JSON-строкой")
    p.add_argument("--workers", type=int, help="число потоков (по умолчанию MVASSOC_WORKERS)")
    p.add_argument("-v", "--verbose", action="store_true", help="уровень лога DEBUG")


def _add_detections(p: argparse.ArgumentParser) -> None:
    p.add_argument("--min-score", type=float, help="порог detection score")
    p.add_argument("--label", help="оставить только маски с этой меткой")


# ---------------------------------------------------------------------------
# Регистрация подкоманд
# ---------------------------------------------------------------------------

def _register_commands(sub) -> None:
    """Все подкоманды и их аргументы."""
    p = sub.add_parser("associate", help="ассоциация масок через 3D-треки")
    p.add_argument("model_dir", help="каталог с images.txt и points3D.txt")
    p.add_argument("detections", help="JSON с детекциями")
    p.add_argument("out_dir", help="каталог для result.json, cloud.ply, tracks.json")
    p.add_argument("--tau-j", type=float, help="порог Жаккара слияния масок")
    p.add_argument("--tau-m", type=float, help="порог Жаккара слияния инстансов")
    p.add_argument("--n-min", type=int, help="инстансы с числом точек <= n_min отбрасываются")
    p.add_argument(
        "--ply-color", choices=COLOR_MODES, default="instance-palette", help="раскраска cloud.ply"
    )
    p.add_argument("--ply-instance", type=int, help="инстанс, выделяемый красным в режиме single-instance")
    _add_detections(p)
    _add_common(p)
    p.set_defaults(handler=_run_associate)

    p = sub.add_parser("baseline", help="наивный IoU-трекер")
    p.add_argument("detections", help="JSON с детекциями")
    p.add_argument("out_dir", help="каталог для baseline.json")
    p.add_argument("--frames", help="файл порядка кадров (пустая строка — граница последовательности)")
    p.add_argument("--tau-iou", type=float, help="порог IoU между соседними кадрами")
    p.add_argument("--matcher", choices=["greedy", "hungarian"], help="политика сопоставления")
    _add_detections(p)
    _add_common(p)
    p.set_defaults(handler=_run_baseline)

    p = sub.add_parser("evaluate", help="Coverage / Adjusted Coverage")
    p.add_argument("predictions", help="result.json или baseline.json")
    p.add_argument("detections", help="JSON с детекциями")
    p.add_argument("gt", help="CSV с GT-боксами")
    p.add_argument("--out-dir", help="куда записать report.json и per_instance.csv")
    p.add_argument("--tau-eval", type=float, help="порог IoU бокса маски и GT-бокса")
    _add_detections(p)
    _add_common(p)
    p.set_defaults(handler=_run_evaluate)

    p = sub.add_parser("synth", help="синтетическая сцена")
    p.add_argument("out_dir", help="каталог сцены")
    p.add_argument("--spec", help="TOML со SceneSpec (по умолчанию — сцена по умолчанию)")
    p.add_argument("--seed", type=int, help="переопределить rng_seed")
    _add_common(p)
    p.set_defaults(handler=_run_synth)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvassoc",
        description="Ассоциация масок инстанс-сегментации между видами через SfM-треки.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _register_commands(sub)
    return parser


# ---------------------------------------------------------------------------
# Запуск подкоманд
# ---------------------------------------------------------------------------

_FLAG_KEYS = ("tau_j", "tau_m", "n_min", "min_score", "label", "tau_iou", "matcher", "tau_eval", "workers")


def _config(args: argparse.Namespace) -> RunConfig:
    flags = {key: getattr(args, key, None) for key in _FLAG_KEYS}
    return resolve_config(args.config, **flags)


def _run_associate(args: argparse.Namespace) -> int:
    return commands.cmd_associate(
        args.model_dir, args.detections, args.out_dir, _config(args),
        ply_color=args.ply_color, ply_instance=args.ply_instance, as_json=args.as_json,
    )


def _run_baseline(args: argparse.Namespace) -> int:
    return commands.cmd_baseline(
        args.detections, args.frames, args.out_dir, _config(args), as_json=args.as_json
    )


def _run_evaluate(args: argparse.Namespace) -> int:
    return commands.cmd_evaluate(
        args.predictions, args.detections, args.gt, args.out_dir, _config(args), as_json=args.as_json
    )


def _run_synth(args: argparse.Namespace) -> int:
    seed = args.seed
    if seed is None and args.config:
        seed = _config(args).seed
    return commands.cmd_synth(args.spec, args.out_dir, seed, as_json=args.as_json)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Разобрать аргументы и выполнить подкоманду.

    :return: код выхода (0 — успех)
    """
    args = build_parser().parse_args(argv)
    configure_logging("DEBUG" if args.verbose else None)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except (ConfigError, OSError) as e:
        # ошибки сборки конфигурации до входа в обработчик
        log.error("CONFIG: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return commands.EXIT_INPUT_ERROR


if __name__ == "__main__":
    try:
        sys.exit(main())
    except Exception:
        log.exception("Fatal error in mvassoc")
        raise
