import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from siltlab.clusters import (
    ClusterPartition,
    check_transform,
    diam,
    iterate_to_single,
    partition,
    replay,
    set_dist,
    shell_membership,
    transform,
    translation_vector,
)
from siltlab.errors import EmptyInput, InvalidConfig


def l1(a, b):
    return sum(abs(x - y) for x, y in zip(a, b))


def naive_partition(points, L):
    """Set-based merge loop: join any two groups closer than 4 max(diam, diam, L)."""
    groups = [{p} for p in sorted(set(points))]
    dm = lambda g: max((l1(a, b) for a in g for b in g), default=0)
    dist = lambda g, h: min(l1(a, b) for a in g for b in h)
    changed = True
    while changed:
        changed = False
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                if dist(groups[i], groups[j]) <= 4 * max(dm(groups[i]), dm(groups[j]), L):
                    groups[i] |= groups.pop(j)
                    changed = True
                    break
            if changed:
                break
    return sorted(sorted(g) for g in groups)


@st.composite
def clustered_sets(draw, d=5, max_points=12, coord=10**6):
    k = draw(st.integers(1, max_points))
    centres = draw(st.lists(st.lists(st.integers(-coord, coord), min_size=d, max_size=d), min_size=1, max_size=4))
    spread = draw(st.sampled_from([1, 10, 100, 10**4, 10**6]))
    pts = []
    for i in range(k):
        c = centres[i % len(centres)]
        off = draw(st.lists(st.integers(-spread, spread), min_size=d, max_size=d))
        pts.append(tuple(a + b for a, b in zip(c, off)))
    return pts


def test_two_close_points_merge():
    p = partition([(0, 0), (1, 0)], 4)
    assert len(p.clusters) == 1


def test_far_points_stay_apart():
    p = partition([(0, 0), (60, 40)], 4)
    assert len(p.clusters) == 2
    assert p.separation_violations() == []


def test_errors():
    with pytest.raises(EmptyInput):
        partition([], 4)
    with pytest.raises(InvalidConfig):
        partition([(0, 0)], 0)


@given(clustered_sets(), st.sampled_from([4, 16]))
def test_partition_invariants(points, L):
    p = partition(points, L)
    flat = sorted(x for c in p.clusters for x in c)
    assert flat == sorted(set(points))
    assert p.separation_violations() == []
    bound = p.diameter_bound()
    assert all(dm <= bound for dm in p.diameters())
    assert p.rounds <= len(set(points))


@given(clustered_sets(d=3, max_points=8, coord=200), st.sampled_from([1, 4, 16]))
def test_partition_matches_naive_merge(points, L):
    assert sorted(sorted(c) for c in partition(points, L).clusters) == naive_partition(points, L)


@given(clustered_sets(d=3, max_points=9, coord=300), st.sampled_from([2, 4]))
def test_shell_meets_set_only_in_cluster(points, L):
    p = partition(points, L)
    for c in p.clusters:
        inside = {x for x in p.source if shell_membership(c, L, x)}
        assert inside == set(c)


def test_shell_examples():
    assert shell_membership([(0, 0)], 4, (0, 0))
    assert not shell_membership([(0, 0)], 4, (3, 2))


def test_two_singletons_land_close():
    p = partition([(0, 0, 0), (7, 2, 1)], 1)
    q, rec = transform(p)
    c = check_transform(p, q, rec)
    assert 1 <= set_dist(q.clusters[rec.anchor_cluster_index], q.clusters[rec.moved_cluster_index]) <= 1 + 3
    assert c.gap_ok and c.congruent


def test_translation_vector_exact_integer_part():
    assert translation_vector((0, 0), (10, 0), 0) == (-9, 0)
    assert translation_vector((0, 0), (-7, 5), 2) == (5, -4)
    assert translation_vector((0, 0), (1, 0), 3) == (0, 0)


@given(clustered_sets(d=5, max_points=12), st.sampled_from([4, 16]))
def test_transform_postconditions(points, L):
    p = partition(points, L)
    q, rec = transform(p)
    if len(p.clusters) < 2:
        assert rec.empty and q is p
        return
    c = check_transform(p, q, rec)
    assert c.gap_ok, c
    assert c.factor_two_ok and c.spectators_unchanged and c.diameter_clearance_ok and c.congruent
    ds = p.diameters()
    m, a = rec.moved_cluster_index, rec.anchor_cluster_index
    assert ds[m] < ds[a] or (ds[m] == ds[a] and m < a)


@given(clustered_sets(d=5, max_points=12), st.sampled_from([4, 16]))
def test_iteration_terminates_and_replays(points, L):
    final, log = iterate_to_single(points, L)
    first = log.cluster_counts[0]
    assert log.iterations <= first
    assert all(b < a for a, b in zip(log.cluster_counts, log.cluster_counts[1:]))
    assert replay(points, L, log) == final


def test_single_cluster_needs_no_iteration():
    final, log = iterate_to_single([(0, 0), (1, 1)], 4)
    assert log.iterations == 0 and final == [(0, 0), (1, 1)]


def test_well_separated_singletons():
    rng = np.random.default_rng(1)
    for _ in range(20):
        k = int(rng.integers(2, 8))
        pts = [tuple(int(v) for v in rng.integers(-10**5, 10**5, size=5)) for _ in range(k)]
        _, log = iterate_to_single(pts, 4)
        assert log.iterations <= k - 1


def test_json_round_trip():
    p = partition([(0, 0), (1, 0), (100, 100)], 4)
    obj = json.loads(p.to_json())
    assert obj["scale"] == 4
    q = ClusterPartition.from_json(p.to_json())
    assert q.clusters == p.clusters and q.L == 4


def test_diam_and_dist():
    assert diam([(0, 0), (3, -4)]) == 7
    assert diam([(5, 5)]) == 0
    assert set_dist([(0, 0)], [(2, 2), (1, 0)]) == 1
