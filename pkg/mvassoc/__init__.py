"""
mvassoc
=======

Ассоциация 2D-масок инстанс-сегментации между непоследовательными кадрами
уличной съёмки через облако точек structure-from-motion (COLMAP).

Содержит:
- colmap_model.py — парсинг/запись текстовой модели COLMAP и проверка инвариантов;
- masks.py — загрузка детекций (JSON + RLE), point-in-mask, bounding box;
- association.py — подъём масок в 3D, кластеризация по Жаккару, слияние, голосование;
- baseline_tracker.py — наивный трекер по 2D IoU между соседними кадрами;
- evaluation.py — GT-боксы, Coverage / Adjusted Coverage;
- synth.py — синтетическая сцена с известной разметкой (оракул);
- export.py — PLY с метками инстансов и JSON для 2D-оверлеев;
- config.py / settings.py — параметры запуска и значения по умолчанию;
- commands.py — обработчики подкоманд CLI (см. cli.py в корне).

Назначение:
mvassoc — библиотечный слой; CLI-обвязка только вызывает его функции.
"""
