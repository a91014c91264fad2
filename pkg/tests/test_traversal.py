import numpy as np
import pytest
from hypothesis import given, strategies as st

from vilstm.errors import ConfigError, DimensionError
from vilstm.tensor import Tensor
from vilstm.traversal import (ALL_DIRECTIONS, CB, CF, DESIGNS, RB, RF, BlockDesign, TraversalPath,
                              apply_permutation, assign_directions, flip_sequence, grid_permutation,
                              inverse_permutation)

grids = st.tuples(st.integers(1, 9), st.integers(1, 9))


@given(grids)
def test_all_paths_are_bijections(grid):
    for d in ALL_DIRECTIONS:
        perm = grid_permutation(TraversalPath(d, grid))
        assert sorted(perm) == list(range(grid[0] * grid[1]))
        np.testing.assert_array_equal(perm[inverse_permutation(perm)], np.arange(len(perm)))


def test_column_order_on_small_grid():
    # 2 x 3 grid, row-major ids 0..5
    assert list(grid_permutation(TraversalPath(CF, (2, 3)))) == [0, 3, 1, 4, 2, 5]
    assert list(grid_permutation(TraversalPath(CB, (2, 3)))) == [5, 2, 4, 1, 3, 0]
    assert list(grid_permutation(TraversalPath(RB, (2, 3)))) == [5, 4, 3, 2, 1, 0]
    assert TraversalPath(CF, (2, 3)).scan_grid == (3, 2)
    assert TraversalPath(RF, (2, 3)).scan_grid == (2, 3)


@given(grids, st.integers(1, 4))
def test_flip_is_involution_and_equals_row_backward(grid, d):
    L = grid[0] * grid[1]
    x = Tensor(np.random.default_rng(L).normal(size=(2, L, d)))
    np.testing.assert_array_equal(flip_sequence(flip_sequence(x)).data, x.data)
    rb = grid_permutation(TraversalPath(RB, grid))
    np.testing.assert_array_equal(flip_sequence(x).data, apply_permutation(x, rb).data)


def test_permute_round_trip_and_length_check():
    perm = grid_permutation(TraversalPath(CF, (3, 4)))
    x = Tensor(np.arange(24.0).reshape(12, 2))
    back = apply_permutation(apply_permutation(x, perm), inverse_permutation(perm))
    np.testing.assert_array_equal(back.data, x.data)
    with pytest.raises(DimensionError):
        apply_permutation(x, perm[:-1])


def test_degenerate_grid():
    with pytest.raises(ConfigError):
        grid_permutation(TraversalPath(RF, (0, 3)))


def test_alternating_schedule_depth_24():
    sched = assign_directions(DESIGNS["alt-bi"], 24)
    # numbering blocks from 1, odd blocks go forward and even blocks backward
    for number, dirs in enumerate(sched, start=1):
        assert dirs == ([RF] if number % 2 else [RB])


def test_schedule_of_non_alternating_designs():
    assert assign_directions(DESIGNS["bi"], 3) == [[RF, RB]] * 3
    assert assign_directions(DESIGNS["alt-quad"], 5) == [[RF], [RB], [CF], [CB], [RF]]
    with pytest.raises(ConfigError):
        assign_directions(DESIGNS["uni"], 0)


def test_design_parameter_sets():
    assert DESIGNS["quad"].param_sets == 4 and DESIGNS["quad"].per_block == 4
    assert DESIGNS["quad-shared"].param_sets == 1 and DESIGNS["quad-shared"].per_block == 4
    assert DESIGNS["alt-bi"].param_sets == 1 and DESIGNS["alt-bi"].per_block == 1
    assert BlockDesign.from_name("bi-shared").name == "bi-shared"
    with pytest.raises(ConfigError):
        BlockDesign.from_name("spiral")
    with pytest.raises(ConfigError):
        BlockDesign(())
    with pytest.raises(ConfigError):
        BlockDesign((RF, RB), alternating=True, shared_params=True)
