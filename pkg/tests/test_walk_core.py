import numpy as np
import pytest
from hypothesis import given, strategies as st

from siltlab.errors import BudgetExceeded, InvalidConfig
from siltlab.walk_core import (
    WalkConfig,
    block_layout,
    draw_moves,
    iter_positions,
    make_rng,
    simulate,
    step,
    step_table,
    walk_batch,
)


def test_step_table_is_closed_unit_ball():
    for d in (1, 2, 5):
        t = step_table(d)
        assert t.shape == (2 * d + 1, d)
        assert len({tuple(r) for r in t}) == 2 * d + 1
        assert np.abs(t).sum(axis=1).max() == 1


def test_step_d1_three_outcomes_equally_likely():
    rng = make_rng(1, 99)
    out = np.array([step([0], rng)[0] for _ in range(30000)])
    freq = np.array([(out == v).mean() for v in (-1, 0, 1)])
    assert set(np.unique(out)) == {-1, 0, 1}
    # binomial 4-sigma band around 1/3
    assert np.all(np.abs(freq - 1 / 3) < 4 * np.sqrt(1 / 3 * 2 / 3 / 30000))


def test_step_frequencies_d5_binomial_band():
    rng = make_rng(7, 1)
    moves = draw_moves(rng, 5, 10**6)
    freq = np.bincount(moves, minlength=11) / 10**6
    sigma = np.sqrt((1 / 11) * (10 / 11) / 10**6)
    assert np.all(np.abs(freq - 1 / 11) < 4 * sigma)


def test_chi_square_one_step_law():
    from scipy.stats import chisquare

    moves = draw_moves(make_rng(3, 2), 3, 70000)
    counts = np.bincount(moves, minlength=7)
    assert chisquare(counts).pvalue > 1e-4


def test_zero_steps_is_origin():
    p = simulate(WalkConfig(4, 0, seed=5))
    assert p.positions.shape == (1, 4)
    assert not p.positions.any()


def test_same_config_same_path():
    c = WalkConfig(3, 500, seed=11, stream_id=2)
    assert np.array_equal(simulate(c).positions, simulate(c).positions)
    other = WalkConfig(3, 500, seed=11, stream_id=3)
    assert not np.array_equal(simulate(c).positions, simulate(other).positions)


def test_streaming_matches_materialised():
    c = WalkConfig(2, 10_000, seed=4)
    streamed = np.concatenate(list(iter_positions(c)))
    assert np.array_equal(streamed, simulate(c).positions)


def test_budget():
    with pytest.raises(BudgetExceeded):
        simulate(WalkConfig(1, 100), max_positions=50)


def test_invalid_config():
    with pytest.raises(InvalidConfig):
        WalkConfig(0, 10)
    with pytest.raises(InvalidConfig):
        WalkConfig(2, -1)


def test_endpoint_mean_clt_band():
    d, n, m = 5, 10_000, 1000
    ends = np.stack([simulate(WalkConfig(d, n, seed=21, stream_id=i)).positions[-1] for i in range(m)])
    # one coordinate moves +-1 with probability 2/(2d+1) per step
    sigma = np.sqrt(n * 2 / (2 * d + 1) / m)
    assert np.all(np.abs(ends.mean(axis=0)) < 4 * sigma)


@given(st.integers(1, 6), st.integers(0, 300), st.integers(0, 2**32))
def test_consecutive_positions_adjacent(d, n, seed):
    pos = simulate(WalkConfig(d, n, seed=seed)).positions
    assert not pos[0].any()
    if n:
        assert np.abs(np.diff(pos, axis=0)).sum(axis=1).max() <= 1


@given(st.integers(1, 50_000), st.integers(0, 5000))
def test_block_layout_covers_samples(samples, n):
    lay = block_layout(samples, n)
    assert sum(c for _, c in lay) == samples
    assert [b for b, _ in lay] == list(range(len(lay)))


def test_walk_batch_shape_and_steps():
    b = walk_batch(make_rng(0, 1), 3, 7, 50)
    assert b.shape == (7, 51, 3)
    assert not b[:, 0].any()
    assert np.abs(np.diff(b, axis=1)).sum(axis=2).max() <= 1
