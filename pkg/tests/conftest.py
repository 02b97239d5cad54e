# tests/conftest.py
from __future__ import annotations

from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pytest

from mvassoc.association import SegmentSupport
from mvassoc.colmap_model import ImageRecord, Keypoint2D, Point3D, Reconstruction, write_model
from mvassoc.core import MaskRef
from mvassoc.masks import DetectionSet, ImageDetections, InstanceMask, encode
from mvassoc.synth import SceneSpec, generate

KeypointSpec = Tuple[float, float, Optional[int]]


# ---------------------------------------------------------------------------
# Реконструкции
# ---------------------------------------------------------------------------

def build_recon(images: Dict[str, Sequence[KeypointSpec]]) -> Reconstruction:
    """
    Согласованная реконструкция из описания {имя: [(x, y, point3d_id|None), ...]}.
    image_id = 1, 2, ... в порядке словаря; треки выводятся из ключевых точек.
    """
    records: Dict[int, ImageRecord] = {}
    tracks: Dict[int, List[Tuple[int, int]]] = {}
    for image_id, (name, kps) in enumerate(images.items(), start=1):
        keypoints = []
        for idx, (x, y, pid) in enumerate(kps):
            keypoints.append(Keypoint2D(idx, float(x), float(y), pid))
            if pid is not None:
                tracks.setdefault(pid, []).append((image_id, idx))
        records[image_id] = ImageRecord(
            image_id=image_id,
            name=name,
            camera_id=1,
            qvec=(1.0, 0.0, 0.0, 0.0),
            tvec=(0.0, 0.0, float(image_id)),
            keypoints=tuple(keypoints),
        )
    points = {
        pid: Point3D(
            id=pid,
            position=(float(pid), 0.5, 2.0),
            color=(pid % 256, 10, 200),
            reproj_error=0.5,
            track=tuple(track),
        )
        for pid, track in sorted(tracks.items())
    }
    return Reconstruction(images=records, points3d=points)


@pytest.fixture
def make_recon():
    """Фабрика согласованных реконструкций (см. build_recon)."""
    return build_recon


@pytest.fixture
def model_dir(tmp_path):
    """Фабрика: записать реконструкцию в tmp-каталог и вернуть путь."""
    def _write(recon: Reconstruction, name: str = "model"):
        path = tmp_path / name
        write_model(recon, path)
        return path
    return _write


# ---------------------------------------------------------------------------
# Маски и опоры
# ---------------------------------------------------------------------------

def build_mask(
    image_name: str = "a.jpg",
    box: Optional[Tuple[int, int, int, int]] = None,
    *,
    pixels: Optional[Iterable[Tuple[int, int]]] = None,
    width: int = 20,
    height: int = 20,
    mask_id: int = 0,
    image_id: Optional[int] = None,
    score: float = 0.9,
    label: str = "building",
) -> InstanceMask:
    """Маска-прямоугольник (x0, y0, x1, y1 включительно) или набор пикселей (x, y)."""
    arr = np.zeros((height, width), dtype=bool)
    if box is not None:
        x0, y0, x1, y1 = box
        arr[y0:y1 + 1, x0:x1 + 1] = True
    for x, y in pixels or ():
        arr[y, x] = True
    return InstanceMask(
        image_name=image_name,
        mask_id=mask_id,
        label=label,
        detection_score=score,
        width=width,
        height=height,
        rle=encode(arr),
        image_id=image_id,
    )


@pytest.fixture
def make_mask():
    return build_mask


def build_dets(masks_by_image: Dict[str, Sequence[InstanceMask]], width: int = 20, height: int = 20,
               image_ids: Optional[Dict[str, int]] = None) -> DetectionSet:
    """DetectionSet из {имя: [маски]}; mask_id переписываются в 0..n-1."""
    images = {}
    for name, masks in masks_by_image.items():
        image_id = (image_ids or {}).get(name)
        fixed = tuple(
            InstanceMask(name, i, m.label, m.detection_score, m.width, m.height, m.rle, image_id)
            for i, m in enumerate(masks)
        )
        images[name] = ImageDetections(name, width, height, fixed, image_id)
    return DetectionSet(images=images)


@pytest.fixture
def make_dets():
    return build_dets


@pytest.fixture
def make_support():
    """Фабрика SegmentSupport: make_support(image_id, mask_id, point_ids)."""
    def _create(image_id: int, mask_id: int, point_ids: Iterable[int], keypoint_count: Optional[int] = None):
        ids = frozenset(point_ids)
        return SegmentSupport(
            mask_ref=MaskRef(f"img{image_id:03d}.jpg", mask_id),
            point_ids=ids,
            keypoint_count=len(ids) if keypoint_count is None else keypoint_count,
            image_id=image_id,
        )
    return _create


# ---------------------------------------------------------------------------
# Синтетические сцены
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def scene():
    """Фабрика сцен с кэшем: одинаковые параметры генерируются один раз за сессию."""
    cache: Dict[Tuple, tuple] = {}

    def _create(**overrides):
        key = tuple(sorted(overrides.items()))
        if key not in cache:
            cache[key] = generate(SceneSpec(**overrides))
        return cache[key]
    return _create
