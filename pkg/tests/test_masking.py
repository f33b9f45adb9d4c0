import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from salt import masking as MK
from salt.data import grid_positions
from salt.errors import ConfigError, DegenerateError, DimensionError

grids = st.tuples(st.integers(1, 8), st.integers(3, 14), st.integers(3, 14))
seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(grids, seeds)
def test_multiblock_masks_are_nondegenerate_tubes(grid, seed):
    for m in MK.sample_multiblock(grid, rng=np.random.default_rng(seed)):
        assert m.masked.shape == (int(np.prod(grid)),)
        assert 0 < m.masked.sum() < m.masked.size
        g = m.as_grid()
        if grid[0] > 1 and g[1:].any():
            # blocks span every temporal slot, apart from the degenerate-repair token
            assert (g[1:] == g[1:2]).all()


@settings(max_examples=60, deadline=None)
@given(grids, st.floats(0.05, 0.95), seeds)
def test_random_tube_ratio_is_exact_to_rounding(grid, ratio, seed):
    t, h, w = grid
    count = MK.round_half_up(ratio * h * w)
    if count <= 0 or count >= h * w:
        with pytest.raises(DegenerateError):
            MK.sample_random_tube(grid, ratio, np.random.default_rng(seed))
        return
    m = MK.sample_random_tube(grid, ratio, np.random.default_rng(seed))
    assert m.masked.sum() == count * t
    assert m.achieved_ratio == pytest.approx(count / (h * w))
    g = m.as_grid()
    assert (g == g[0]).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.floats(0.01, 0.99))
def test_causal_mask_hides_a_suffix(t, ratio):
    grid = (t, 3, 3)
    slots = MK.round_half_up(ratio * t)
    if not 0 < slots < t:
        with pytest.raises(DegenerateError):
            MK.sample_causal(grid, ratio)
        return
    g = MK.sample_causal(grid, ratio).as_grid()
    assert g[t - slots:].all() and not g[: t - slots].any()


def test_causal_rounds_half_up():
    assert MK.sample_causal((8, 2, 2), 0.5625).as_grid()[:, 0, 0].tolist() == [False] * 3 + [True] * 5
    assert MK.round_half_up(2.5) == 3 and MK.round_half_up(3.5) == 4


def test_block_size_oracle():
    assert MK.block_size((8, 14, 14), 0.15, 1.0, 1.0) == (8, 5, 5)
    assert MK.block_size((8, 14, 14), 0.7, 1.0, 1.0) == (8, 12, 12)
    # aspect stretches height, shrinks width
    assert MK.block_size((8, 14, 14), 0.7, 0.5, 1.5) == (4, 14, 10)


def test_union_ratio_and_seeding():
    a = MK.sample_multiblock((8, 8, 8), rng=np.random.default_rng(3))
    b = MK.sample_multiblock((8, 8, 8), rng=np.random.default_rng(3))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.masked, y.masked)
    union = (a[0].masked | a[1].masked).mean()
    assert MK.combined_ratio(a) == pytest.approx(union)
    assert MK.combined_ratio(a) >= max(m.achieved_ratio for m in a)


def test_default_multiblock_ratio_near_point_nine():
    stats = MK.mask_stats("multiblock", (8, 14, 14), 1000, seed=0)
    assert 0.85 <= stats["combined_mean"] <= 0.95
    assert stats["frequency"].shape == (8, 14, 14)
    assert np.allclose(stats["frequency"], stats["frequency"][0], atol=0.01)


@settings(max_examples=30, deadline=None)
@given(grids, seeds)
def test_split_view_reassemble_round_trip(grid, seed):
    rng = np.random.default_rng(seed)
    n = int(np.prod(grid))
    tokens = rng.standard_normal((n, 3))
    (mask, _) = MK.sample_multiblock(grid, rng=rng)
    view = MK.split_view(tokens, None, mask)
    assert view.x.shape[0] + view.y.shape[0] == n
    np.testing.assert_array_equal(view.y_positions, grid_positions(grid)[mask.masked])
    np.testing.assert_array_equal(MK.reassemble(view), tokens)


def test_sample_pair_counts_and_errors():
    rng = np.random.default_rng(0)
    assert len(MK.sample_pair("random_tube", (4, 6, 6), rng)) == 1
    for s in ("multiblock", "multi_random_tube", "causal"):
        assert len(MK.sample_pair(s, (4, 6, 6), rng, ratios=(0.5, 0.75))) == 2
    with pytest.raises(ConfigError):
        MK.sample_pair("zigzag", (4, 6, 6), rng)
    with pytest.raises(DegenerateError):
        MK.sample_random_tube((4, 6, 6), 1.0)
    with pytest.raises(ConfigError):
        MK.sample_multiblock((1, 2, 2), MK.MultiBlockParams(short_scale=0.1))
    with pytest.raises(DimensionError):
        MK.split_view(np.zeros((5, 2)), None, MK.sample_causal((2, 2, 2), 0.5))
