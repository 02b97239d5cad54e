# tests/test_association.py
from __future__ import annotations

import json
import random

import pytest

from mvassoc.association import (
    AssociationConfig,
    BuildingInstance,
    associate,
    build_supports,
    cluster_masks,
    filter_and_label,
    jaccard,
    merge_instances,
    result_payload,
    save_result,
)
from mvassoc.core import ConfigError, MaskRef
from mvassoc.masks import DetectionSet
from mvassoc.synth import instance_buildings, oracle_partition


def _partition(instances):
    return {(frozenset(i.members), frozenset(i.points)) for i in instances}


def _inst(instance_id, refs, points):
    return BuildingInstance(instance_id, tuple(refs), frozenset(points))


# ---------------------------------------------------------------------------
# Независимая наивная реализация (эталон для сравнения)
# ---------------------------------------------------------------------------

def naive_cluster(supports, tau_j):
    remaining = sorted((s for s in supports if s.point_ids), key=lambda s: s.order_key)
    clusters = []
    while remaining:
        best = remaining[0]
        for s in remaining[1:]:
            if len(s.point_ids) > len(best.point_ids):
                best = s
        remaining = [s for s in remaining if s is not best]
        members, pts = {best.mask_ref}, set(best.point_ids)
        grew = True
        while grew:
            grew = False
            for s in list(remaining):
                if len(s.point_ids & pts) / len(s.point_ids | pts) >= tau_j:
                    members.add(s.mask_ref)
                    pts |= s.point_ids
                    remaining.remove(s)
                    grew = True
        clusters.append((members, pts))
    return clusters


def naive_merge(clusters, tau_m):
    inst = [(set(m), set(p)) for m, p in clusters]
    while True:
        for u in range(len(inst)):
            for v in range(u + 1, len(inst)):
                pu, pv = inst[u][1], inst[v][1]
                if len(pu & pv) / len(pu | pv) >= tau_m:
                    inst[u] = (inst[u][0] | inst[v][0], pu | pv)
                    del inst[v]
                    break
            else:
                continue
            break
        else:
            return {(frozenset(m), frozenset(p)) for m, p in inst}


def _random_supports(rng, make_support):
    """Маски нескольких «объектов» с пересечениями и шумом; <= 60 масок, <= 500 точек."""
    n_points = rng.randint(20, 500)
    n_objects = rng.randint(1, 8)
    bounds = sorted(rng.sample(range(1, n_points), min(n_objects - 1, n_points - 2)))
    ranges = list(zip([0, *bounds], [*bounds, n_points]))
    supports = []
    n_masks = rng.randint(1, 60)
    for k in range(n_masks):
        lo, hi = ranges[rng.randrange(len(ranges))]
        own = [p for p in range(lo, hi) if rng.random() < rng.uniform(0.2, 0.9)]
        noise = rng.sample(range(n_points), rng.randint(0, 5))
        if rng.random() < 0.05:
            own, noise = [], []
        image_id = rng.randint(1, 15)
        supports.append(make_support(image_id, k, set(own) | set(noise)))
    return supports


# ---------------------------------------------------------------------------
# jaccard
# ---------------------------------------------------------------------------

def test_jaccard_examples():
    assert jaccard({1, 2}, {1, 2}) == 1.0
    assert jaccard({1, 2}, {3}) == 0.0
    assert jaccard({1, 2, 3, 4}, {3, 4, 5}) == pytest.approx(0.4)
    assert jaccard(set(), set()) == 0.0
    assert jaccard([1, 2, 3], (2, 3)) == jaccard({2, 3}, {1, 2, 3})


# ---------------------------------------------------------------------------
# build_supports
# ---------------------------------------------------------------------------

def test_build_supports_membership(make_recon, make_mask, make_dets):
    recon = make_recon({
        "a.jpg": [(2.5, 2.5, 7), (3.1, 3.9, None), (4.0, 2.0, 9), (15.0, 15.0, 11)],
    })
    inside = make_mask("a.jpg", (2, 2, 5, 5))
    empty = make_mask("a.jpg", (10, 0, 12, 2))
    dets = make_dets({"a.jpg": [inside, empty]}, image_ids={"a.jpg": 1})
    supports = build_supports(recon, dets)
    assert supports[0].point_ids == frozenset({7, 9})
    assert supports[0].keypoint_count == 3
    assert supports[1].point_ids == frozenset() and supports[1].keypoint_count == 0


def test_overlapping_masks_share_keypoints(make_recon, make_mask, make_dets):
    recon = make_recon({"a.jpg": [(3.0, 3.0, 1)]})
    dets = make_dets({"a.jpg": [make_mask("a.jpg", (0, 0, 5, 5)), make_mask("a.jpg", (2, 2, 8, 8))]},
                     image_ids={"a.jpg": 1})
    assert [s.point_ids for s in build_supports(recon, dets)] == [frozenset({1}), frozenset({1})]


def test_unregistered_image_gives_empty_support(make_recon, make_mask, make_dets):
    recon = make_recon({"a.jpg": [(3.0, 3.0, 1)]})
    dets = make_dets({"a.jpg": [make_mask("a.jpg", (0, 0, 5, 5))], "ghost.jpg": [make_mask("ghost.jpg", (0, 0, 5, 5))]},
                     image_ids={"a.jpg": 1})
    supports = build_supports(recon, dets)
    assert supports[1].mask_ref == MaskRef("ghost.jpg", 0)
    assert supports[1].point_ids == frozenset()


def test_supports_match_oracle_on_clean_scene(scene):
    recon, dets, _, truth = scene()
    for s in build_supports(recon, dets):
        b = truth.mask_building[s.mask_ref]
        assert s.point_ids
        assert {truth.point_building[p] for p in s.point_ids} == {b}


# ---------------------------------------------------------------------------
# cluster_masks / merge_instances
# ---------------------------------------------------------------------------

def test_cluster_identical_and_disjoint(make_support):
    a, b = make_support(1, 0, {1, 2, 3}), make_support(2, 0, {1, 2, 3})
    assert len(cluster_masks([a, b], 0.2)) == 1
    c = make_support(3, 0, {10, 11})
    assert len(cluster_masks([a, c], 0.2)) == 2


def test_cluster_chain(make_support):
    a = make_support(1, 0, range(1, 11))
    b = make_support(2, 0, range(6, 16))
    c = make_support(3, 0, range(12, 21))
    out = cluster_masks([c, b, a], 0.25)
    assert [(i.members, i.points) for i in out] == [
        ((a.mask_ref, b.mask_ref), frozenset(range(1, 16))),
        ((c.mask_ref,), frozenset(range(12, 21))),
    ]


def test_cluster_seed_tie_uses_lowest_ref(make_support):
    late = make_support(5, 0, {1, 2})
    early = make_support(2, 1, {3, 4})
    out = cluster_masks([late, early], 0.5)
    assert out[0].members == (early.mask_ref,)


def test_cluster_skips_empty_supports(make_support):
    out = cluster_masks([make_support(1, 0, set()), make_support(2, 0, {1})], 0.2)
    assert len(out) == 1 and out[0].members == (MaskRef("img002.jpg", 0),)


def test_cluster_invariant_under_input_permutation(make_support):
    rng = random.Random(5)
    supports = _random_supports(rng, make_support)
    shuffled = list(supports)
    rng.shuffle(shuffled)
    assert cluster_masks(supports, 0.2) == cluster_masks(shuffled, 0.2)


def test_merge_identical():
    out = merge_instances([_inst(0, [MaskRef("a", 0)], {1, 2}), _inst(1, [MaskRef("b", 0)], {1, 2})], 0.15)
    assert len(out) == 1 and set(out[0].members) == {MaskRef("a", 0), MaskRef("b", 0)}


def test_merge_disjoint_keeps_all():
    inst = [_inst(0, [MaskRef("a", 0)], {1}), _inst(1, [MaskRef("b", 0)], {2, 3})]
    out = merge_instances(inst, 0.15)
    assert _partition(out) == _partition(inst)
    assert [i.instance_id for i in out] == [0, 1]
    assert out[0].points == frozenset({2, 3})


def test_merge_trace():
    p1 = _inst(0, [MaskRef("a", 0)], range(1, 11))
    p2 = _inst(1, [MaskRef("b", 0)], range(8, 13))
    p3 = _inst(2, [MaskRef("c", 0)], range(11, 19))
    out = merge_instances([p1, p2, p3], 0.2)
    assert [(i.instance_id, i.points) for i in out] == [
        (0, frozenset(range(1, 13))),
        (1, frozenset(range(11, 19))),
    ]


def test_merge_fixpoint_postcondition(make_support):
    rng = random.Random(9)
    out = merge_instances(cluster_masks(_random_supports(rng, make_support), 0.2), 0.15)
    for u in range(len(out)):
        for v in range(u + 1, len(out)):
            assert jaccard(out[u].points, out[v].points) < 0.15


@pytest.mark.parametrize("case", range(50))
def test_matches_naive_implementation(case, make_support):
    rng = random.Random(1000 + case)
    supports = _random_supports(rng, make_support)
    tau_j = rng.choice([0.1, 0.15, 0.2, 0.25, 0.3, 0.4])
    tau_m = rng.choice([0.1, 0.15, 0.2, 0.25])

    clusters = cluster_masks(supports, tau_j)
    expected_clusters = naive_cluster(supports, tau_j)
    assert _partition(clusters) == {(frozenset(m), frozenset(p)) for m, p in expected_clusters}

    assert _partition(merge_instances(clusters, tau_m)) == naive_merge(expected_clusters, tau_m)


# ---------------------------------------------------------------------------
# filter_and_label
# ---------------------------------------------------------------------------

def test_n_min_is_strict(make_support):
    s = make_support(1, 0, range(10))
    inst = [_inst(0, [s.mask_ref], range(10))]
    assert filter_and_label(inst, [s], 10).instances == ()
    assert filter_and_label(inst, [s], 10).unassigned_masks == (s.mask_ref,)
    assert len(filter_and_label(inst, [s], 9).instances) == 1


def test_majority_label(make_support):
    a = [make_support(1, k, {1, 100 + k}) for k in range(3)]
    b = [make_support(2, 0, {1, 200})]
    instances = [
        _inst(0, [s.mask_ref for s in b], {1, 200}),
        _inst(1, [s.mask_ref for s in a], {1, 100, 101, 102}),
    ]
    result = filter_and_label(instances, a + b, 0)
    assert result.point_labels[1] == 1
    assert result.point_labels[200] == 0


def test_tie_goes_to_lower_instance(make_support):
    a = [make_support(1, k, {1}) for k in range(2)]
    b = [make_support(2, k, {1}) for k in range(2)]
    instances = [_inst(0, [s.mask_ref for s in a], {1}), _inst(1, [s.mask_ref for s in b], {1})]
    assert filter_and_label(instances, a + b, 0).point_labels == {1: 0}


def test_labels_point_into_containing_instance(make_support):
    rng = random.Random(17)
    supports = _random_supports(rng, make_support)
    instances = merge_instances(cluster_masks(supports, 0.2), 0.15)
    result = filter_and_label(instances, supports, 3)
    by_id = {i.instance_id: i for i in result.instances}
    for pid, iid in result.point_labels.items():
        assert pid in by_id[iid].points
    assert all(len(i.points) > 3 for i in result.instances)


# ---------------------------------------------------------------------------
# associate и сериализация
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        AssociationConfig(tau_j=0.0)
    with pytest.raises(ConfigError):
        AssociationConfig(tau_m=1.5)
    with pytest.raises(ConfigError):
        AssociationConfig(n_min=-1)


def test_associate_empty(make_recon):
    result = associate(make_recon({"a.jpg": [(1, 1, 1)]}), DetectionSet())
    assert result.instances == () and result.point_labels == {}


def test_associate_clean_scene_matches_oracle(scene):
    recon, dets, _, truth = scene()
    result = associate(recon, dets)
    expected = {frozenset(refs) for refs in oracle_partition(truth).values()}
    assert {frozenset(i.members) for i in result.instances} == expected
    building_of = instance_buildings(result.instances, truth)
    assert {pid: building_of[iid] for pid, iid in result.point_labels.items()} == truth.point_building


def test_associate_independent_of_workers(scene):
    recon, dets, _, _ = scene(num_buildings=3, num_frames=12, rng_seed=4, keypoint_noise_sigma=1.0)
    assert associate(recon, dets, workers=1) == associate(recon, dets, workers=4)


def test_result_payload_schema(tmp_path, make_support):
    s = make_support(1, 0, range(20))
    result = filter_and_label([_inst(0, [s.mask_ref], range(20))], [s, make_support(2, 0, set())], 10)
    path = tmp_path / "result.json"
    save_result(result, path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload == result_payload(result)
    assert payload["instances"] == [{"id": 0, "masks": [["img001.jpg", 0]], "num_points": 20}]
    assert list(payload["point_labels"]) == [str(p) for p in range(20)]
    assert payload["unassigned"] == [["img002.jpg", 0]]
