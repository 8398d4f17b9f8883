import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from siltlab.errors import InvalidConfig
from siltlab.local_time import (
    LevelSetSpec,
    LocalTimeField,
    accumulate,
    accumulate_stream,
    batch_norm2,
    incremental_b,
    intersection_stats,
    level_set,
    q_norm,
    restricted_stats,
    running_b,
)
from siltlab.walk_core import WalkConfig, iter_positions, make_rng, simulate, walk_batch


def pair_count(pos):
    """O(n^2) oracle for B."""
    n = len(pos)
    return sum(1 for i in range(n) for j in range(i + 1, n) if np.array_equal(pos[i], pos[j]))


paths = st.integers(1, 4).flatmap(
    lambda d: st.lists(st.lists(st.integers(-3, 3), min_size=d, max_size=d), min_size=0, max_size=60)
)


def test_constant_path():
    f = accumulate(np.zeros((7, 2), dtype=int))
    assert f[(0, 0)] == 7 and len(f) == 1
    s = intersection_stats(f)
    assert s.b_n == 21 and s.norm2_sq == 49


def test_small_d1_path():
    f = accumulate(np.array([[0], [1], [0], [-1]]), 4)
    assert f.as_dict() == {(0,): 2, (1,): 1, (-1,): 1}


def test_walkpath_counts_first_n_positions():
    p = simulate(WalkConfig(3, 200, seed=1))
    f = accumulate(p)
    assert f.total() == 200 and f.elapsed == 200
    direct = accumulate(p.positions[:200])
    assert f.as_dict() == direct.as_dict()


def test_distinct_path():
    pos = np.arange(10)[:, None]
    s = intersection_stats(accumulate(pos))
    assert s.b_n == 0 and s.norm2_sq == 10


def test_b_matches_pairwise_oracle_d5():
    pos = simulate(WalkConfig(5, 1000, seed=3)).positions[:1000]
    assert intersection_stats(accumulate(pos)).b_n == pair_count(pos)


def test_incremental_matches_pairwise_long():
    pos = simulate(WalkConfig(1, 10_000, seed=8)).positions[:10_000]
    # pair count by sorting is the O(n log n) form of the same oracle; check a prefix brute force too
    assert running_b(pos[:600])[-1] == pair_count(pos[:600])
    vals, counts = np.unique(pos[:, 0], return_counts=True)
    assert running_b(pos)[-1] == int((counts * (counts - 1) // 2).sum())


def test_incremental_two_step_stream():
    assert list(incremental_b([[0], [0]])) == [0, 1]


@given(paths)
def test_incremental_equals_batch_forms(pos):
    pos = np.array(pos, dtype=np.int64).reshape(len(pos), -1) if pos else np.zeros((0, 1), dtype=np.int64)
    f = accumulate(pos)
    s = intersection_stats(f)
    assert s.norm2_sq == 2 * s.b_n + len(pos)
    inc = list(incremental_b(pos))
    assert (inc[-1] if inc else 0) == s.b_n
    rb = running_b(pos)
    assert list(rb) == inc


@given(paths)
def test_counts_sum_to_n(pos):
    pos = np.array(pos, dtype=np.int64).reshape(len(pos), -1) if pos else np.zeros((0, 1), dtype=np.int64)
    f = accumulate(pos)
    assert f.total() == len(pos)
    assert np.all(f.counts >= 0)


def test_batch_norm2_matches_fields():
    b = walk_batch(make_rng(5, 0), 3, 20, 300)
    n2, B = batch_norm2(b, 300)
    for i in range(20):
        s = intersection_stats(accumulate(b[i, :300]))
        assert n2[i] == s.norm2_sq and B[i] == s.b_n


def test_stream_accumulation_equals_offline():
    c = WalkConfig(4, 20_000, seed=9)
    pos = np.concatenate(list(iter_positions(c)))
    pieces = [pos[i : i + 777] for i in range(0, len(pos), 777)]
    f1 = accumulate_stream(iter(pieces), 20_000)
    f2 = accumulate(simulate(c))
    assert f1.as_dict() == f2.as_dict()


@given(st.integers(2, 200), st.integers(0, 1000))
def test_decomposition_and_monotonicity(n, seed):
    pos = simulate(WalkConfig(2, n, seed=seed)).positions
    k = n // 2
    whole = accumulate(pos, n)
    head = accumulate(pos, k)
    tail = accumulate(pos, n, start=k)
    merged = head.merge(tail)
    assert merged.as_dict() == whole.as_dict()
    longer = accumulate(pos, n + 1)
    for x, c in whole.as_dict().items():
        assert longer[x] >= c
        # superadditivity of squares
        assert head[x] ** 2 + tail[x] ** 2 <= c**2
    thr = 2
    assert level_set(whole, LevelSetSpec.high(thr)) <= level_set(longer, LevelSetSpec.high(thr))


def test_q_norm_examples():
    f = LocalTimeField.from_dict({(0,): 3, (1,): 4})
    assert q_norm(f, 2) == 5.0
    assert q_norm(f, 1) == 7.0
    assert math.isclose(q_norm(f, 3), (27 + 64) ** (1 / 3))
    with pytest.raises(InvalidConfig):
        q_norm(f, 0.5)


def test_q2_is_root_norm2():
    f = accumulate(simulate(WalkConfig(3, 500, seed=2)))
    assert q_norm(f, 2) == math.sqrt(intersection_stats(f).norm2_sq)


def test_level_sets():
    f = LocalTimeField.from_dict({(0,): 10})
    assert level_set(f, LevelSetSpec.window(2, 8)) == {(0,)}
    assert level_set(LocalTimeField.empty(3), LevelSetSpec.window(2, 8)) == frozenset()
    with pytest.raises(InvalidConfig):
        LevelSetSpec.window(1, 8)
    with pytest.raises(InvalidConfig):
        LevelSetSpec("X")


def test_level_set_scan_oracle():
    n = 100_000
    f = accumulate(simulate(WalkConfig(1, n, seed=6)))
    xi, A = math.sqrt(n), 2.0
    direct = {x for x, c in f.as_dict().items() if xi / A <= c < A * xi}
    assert level_set(f, LevelSetSpec.window(A, xi)) == direct
    eps = 0.1
    direct_r = {x for x, c in f.as_dict().items() if n ** (0.5 - eps) <= c <= n ** (0.5 + eps)}
    assert level_set(f, LevelSetSpec.typical(eps)) == direct_r


@given(st.dictionaries(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), st.integers(1, 50), max_size=30),
       st.sets(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), max_size=30),
       st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_restricted_stats_filter_oracle(counts, subset, q):
    f = LocalTimeField.from_dict(counts, d=2)
    expect = sum(c**q for x, c in counts.items() if x in subset) ** (1 / q)
    assert math.isclose(restricted_stats(f, subset, q), expect, rel_tol=1e-12, abs_tol=1e-12)
    if counts:
        assert math.isclose(restricted_stats(f, counts.keys(), q), q_norm(f, q), rel_tol=1e-12)
    assert restricted_stats(f, [(99, 99)], q) == 0


def test_csv_round_trip():
    f = accumulate(simulate(WalkConfig(3, 400, seed=12)))
    text = f.to_csv()
    assert text.splitlines()[0] == "x_1,x_2,x_3,count"
    g = LocalTimeField.from_csv(text)
    assert g.as_dict() == f.as_dict() and g.elapsed == f.elapsed


@given(st.lists(st.dictionaries(st.tuples(st.integers(-3, 3)), st.integers(1, 9), max_size=6), min_size=3, max_size=3))
def test_merge_associative(dicts):
    a, b, c = (LocalTimeField.from_dict(x, d=1) for x in dicts)
    assert a.merge(b).merge(c).as_dict() == a.merge(b.merge(c)).as_dict()
