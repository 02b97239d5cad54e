# tests/test_synth.py
from __future__ import annotations

import random
import time
from dataclasses import replace

import pytest

from mvassoc.association import associate, build_supports, cluster_masks, merge_instances, result_payload
from mvassoc.baseline_tracker import track_sequences, tracks_payload
from mvassoc.colmap_model import parse_model, validate
from mvassoc.core import SceneSpecError
from mvassoc.evaluation import PredictedInstance, evaluate, predictions_from_payload
from mvassoc.masks import DetectionSet, load_detections
from mvassoc.synth import (
    SceneSpec,
    generate,
    instance_buildings,
    load_scene_spec,
    load_truth,
    oracle_agreement,
    oracle_partition,
    sequence_upper_bound,
    write_scene,
)


def _assert_oracle_recovered(result, truth):
    expected = {frozenset(refs) for refs in oracle_partition(truth).values()}
    assert {frozenset(i.members) for i in result.instances} == expected
    building_of = instance_buildings(result.instances, truth)
    assert {pid: building_of[iid] for pid, iid in result.point_labels.items()} == truth.point_building


def _shuffled_input(dets, truth, seed):
    """Перемешать порядок последовательностей и кадров внутри них, как в сборной выдаче."""
    rng = random.Random(seed)
    sequences = [list(seq) for seq in truth.sequences]
    rng.shuffle(sequences)
    for seq in sequences:
        rng.shuffle(seq)
    names = [n for seq in sequences for n in seq if n in dets.images]
    shuffled = DetectionSet(images={n: dets.images[n] for n in names}, unmatched=dets.unmatched)
    return shuffled, sequences


def _baseline_frames(dets, sequences):
    index = 0
    frames_by_sequence = []
    for names in sequences:
        frames = []
        for name in names:
            det = dets.images.get(name)
            frames.append((index, list(det.masks) if det is not None else []))
            index += 1
        frames_by_sequence.append(frames)
    return frames_by_sequence


# ---------------------------------------------------------------------------
# SceneSpec
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"num_buildings": 0},
    {"points_per_building": -1},
    {"num_frames": 3, "num_sequences": 4},
    {"track_dropout": 1.5},
    {"wrong_track_rate": -0.1},
    {"keypoint_noise_sigma": -1.0},
    {"mask_mode": "rendered"},
    {"split_building": 10},
    {"split_building": 0, "num_sequences": 1},
    {"image_size": (0, 480)},
])
def test_invalid_spec(kwargs):
    with pytest.raises(SceneSpecError):
        SceneSpec(**kwargs)


def test_load_scene_spec_table(tmp_path):
    path = tmp_path / "scene.toml"
    path.write_text(
        "[scene]\nnum_buildings = 3\nimage_size = [320, 240]\nwrong_track_rate = 0.05\n",
        encoding="utf-8",
    )
    spec = load_scene_spec(path)
    assert spec == SceneSpec(num_buildings=3, image_size=(320, 240), wrong_track_rate=0.05)


def test_load_scene_spec_top_level(tmp_path):
    path = tmp_path / "scene.toml"
    path.write_text("rng_seed = 11\nnum_frames = 8\nnum_sequences = 2\n", encoding="utf-8")
    assert load_scene_spec(path) == SceneSpec(rng_seed=11, num_frames=8, num_sequences=2)


@pytest.mark.parametrize("text", [
    "[scene]\nbuildings = 3\n",
    "[scene]\nnum_buildings = 0\n",
    "[scene\nnum_buildings = 3\n",
])
def test_load_scene_spec_errors(tmp_path, text):
    path = tmp_path / "scene.toml"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(SceneSpecError):
        load_scene_spec(path)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_single_building_single_frame():
    recon, dets, gt, truth = generate(SceneSpec(num_buildings=1, num_frames=1, num_sequences=1))
    assert len(dets) == 1 and len(gt) == 1
    keypoints = recon.images[1].keypoints
    assert keypoints
    assert all(truth.point_building[kp.point3d_id] == 0 for kp in keypoints)
    assert set(truth.point_building.values()) == {0}


def test_unseen_building_is_an_error():
    # одна камера в середине длинной улицы не видит крайние дома
    with pytest.raises(SceneSpecError):
        generate(SceneSpec(num_frames=1, num_sequences=1))


def test_same_seed_same_bytes(tmp_path):
    spec = SceneSpec(num_buildings=4, num_frames=12, keypoint_noise_sigma=1.0,
                     track_dropout=0.1, wrong_track_rate=0.05, miss_rate=0.1, rng_seed=3)
    first = write_scene(tmp_path / "a", *generate(spec))
    second = write_scene(tmp_path / "b", *generate(spec))
    for key in ("detections", "gt", "frames", "truth"):
        assert first[key].read_bytes() == second[key].read_bytes()
    for name in ("images.txt", "points3D.txt"):
        assert (first["model"] / name).read_bytes() == (second["model"] / name).read_bytes()

    other = generate(replace(spec, rng_seed=4))
    assert other[0] != generate(spec)[0]


@pytest.mark.parametrize("spec", [
    SceneSpec(num_buildings=5),
    SceneSpec(keypoint_noise_sigma=2.0, track_dropout=0.2, wrong_track_rate=0.1, rng_seed=5),
    SceneSpec(split_building=2, mask_mode="per-building-region"),
])
def test_generated_model_is_consistent(spec):
    recon, dets, gt, truth = generate(spec)
    assert validate(recon) == []
    assert set(truth.mask_building) == {m.ref for m in dets.masks()}
    assert {g.frame for g in gt} <= set(dets.images)
    assert all(m.image_id == dets.images[m.image_name].image_id for m in dets.masks())
    assert [n for seq in truth.sequences for n in seq] == [img.name for img in recon.images.values()]


def test_write_scene_reloads(tmp_path):
    recon, dets, gt, truth = generate(SceneSpec(num_buildings=3, num_frames=12, rng_seed=2))
    paths = write_scene(tmp_path, recon, dets, gt, truth)
    assert parse_model(paths["model"]) == recon
    assert load_detections(paths["detections"], 0.0, image_ids=recon.name_index()) == dets
    assert load_truth(paths["truth"]) == truth


def test_region_masks_keep_supports_clean():
    recon, dets, _, truth = generate(SceneSpec(mask_mode="per-building-region"))
    for s in build_supports(recon, dets):
        assert {truth.point_building[p] for p in s.point_ids} == {truth.mask_building[s.mask_ref]}


def test_sequence_upper_bound_per_building(scene):
    _, _, gt, truth = scene()
    bound = sequence_upper_bound(gt, truth.sequences)
    assert set(bound) == {g.gt_id for g in gt}
    assert all(0.0 < b < 1.0 for b in bound.values())


def test_missed_detections_leave_gt(scene):
    _, dets, gt, truth = scene(miss_rate=0.3, rng_seed=2)
    assert len(gt) > len(dets)
    preds = [PredictedInstance(b, refs) for b, refs in oracle_partition(truth).items()]
    report = evaluate(preds, dets, gt)
    assert sum(s.missed_seg_frames for s in report.per_instance) == len(gt) - len(dets)
    assert all(s.adjusted_coverage == 1.0 for s in report.per_instance)
    assert report.mean_coverage < 1.0


# ---------------------------------------------------------------------------
# Сквозные сценарии
# ---------------------------------------------------------------------------

@pytest.mark.slow
def test_clean_street_recovers_oracle(scene):
    recon, dets, _, truth = scene(points_per_building=300)
    started = time.perf_counter()
    result = associate(recon, dets)
    assert time.perf_counter() - started < 10.0
    assert len(result.instances) == 10
    _assert_oracle_recovered(result, truth)


@pytest.mark.slow
def test_split_building_needs_merge(scene):
    recon, dets, _, truth = scene(points_per_building=300, split_building=3)
    clusters = cluster_masks(build_supports(recon, dets), 0.20)
    assert len(clusters) == 11
    merged = merge_instances(clusters, 0.15)
    assert len(merged) == 10

    result = associate(recon, dets)
    _assert_oracle_recovered(result, truth)


@pytest.mark.slow
def test_association_beats_sequence_local_baseline(scene):
    recon, dets, gt, truth = scene(keypoint_noise_sigma=1.0, track_dropout=0.1, wrong_track_rate=0.05, rng_seed=7)
    shuffled, sequences = _shuffled_input(dets, truth, seed=7)
    assert list(shuffled.images) != list(dets.images)

    result = associate(recon, shuffled)
    assert result == associate(recon, dets)
    ours = evaluate(predictions_from_payload(result_payload(result)), shuffled, gt)
    tracks = track_sequences(_baseline_frames(shuffled, sequences))
    baseline = evaluate(predictions_from_payload(tracks_payload(tracks)), shuffled, gt)

    assert ours.mean_adjusted_coverage > baseline.mean_adjusted_coverage
    bound = sequence_upper_bound(gt, truth.sequences)
    for s in baseline.per_instance:
        assert s.coverage <= bound[s.gt_id] + 0.01


def test_wrong_links_keep_majority_labels(scene):
    recon, dets, _, truth = scene(wrong_track_rate=0.1)
    supports = build_supports(recon, dets)
    foreign = [
        sum(truth.point_building[p] != truth.mask_building[s.mask_ref] for p in s.point_ids) / len(s.point_ids)
        for s in supports
    ]
    assert sum(foreign) / len(foreign) < 0.15
    assert oracle_agreement(associate(recon, dets), truth) >= 0.95


@pytest.mark.slow
def test_agreement_degrades_with_wrong_links(scene):
    rates = (0.0, 0.1, 0.2, 0.35, 0.5)
    monotone = 0
    for seed in range(5):
        agreement = []
        for rate in rates:
            recon, dets, _, truth = scene(wrong_track_rate=rate, rng_seed=seed)
            agreement.append(oracle_agreement(associate(recon, dets), truth))
        assert agreement[0] == 1.0
        if all(b <= a + 0.02 for a, b in zip(agreement, agreement[1:])):
            monotone += 1
    assert monotone >= 3
