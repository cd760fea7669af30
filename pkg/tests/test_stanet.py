import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vqapipe.errors import NumericError, ShapeError
from vqapipe.pqanet import PQAConfig
from vqapipe.stanet import (GRID, STAConfig, STANet, aggregate, aggregation_weights, area_resample, area_weights,
                            assemble_feature_tensor, assemble_quality_tensor, grid_from_order)

from gradcheck import directional_check
from oracles import block_means


def test_grid_constants():
    assert GRID == (16, 9, 10)
    assert STAConfig.for_channels(PQAConfig.tiny().channels).in_channels == 12 + 32
    assert STAConfig().in_channels == 176


@given(st.integers(1, 40), st.integers(1, 20))
def test_area_weights_rows_sum_to_one(n_in, n_out):
    w = area_weights(n_in, n_out)
    assert w.shape == (n_out, n_in)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(w >= 0)


def test_area_resample_block_means_exact():
    rng = np.random.default_rng(0)
    grid = rng.integers(-1000, 1000, (32, 18, 20)).astype(np.float64) / 8
    out = area_resample(grid)
    assert out.shape == GRID
    assert np.array_equal(out, np.array(block_means(grid.tolist(), 2, 2, 2)))


def test_area_resample_replicates_small_grids():
    out = area_resample(np.full((1, 1, 1), 3.25))
    assert np.all(out == 3.25)
    grid = np.arange(2 * 1 * 5, dtype=float).reshape(2, 1, 5)
    up = area_resample(grid)
    assert np.array_equal(up[:8, :, :2], np.full((8, 9, 2), grid[0, 0, 0]))
    assert np.array_equal(up[8:, :, -2:], np.full((8, 9, 2), grid[1, 0, 4]))


@given(st.tuples(st.integers(1, 40), st.integers(1, 20), st.integers(1, 25)), st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_area_resample_preserves_constants(dims, c):
    out = area_resample(np.full(dims, c))
    np.testing.assert_allclose(out, c, rtol=1e-12, atol=1e-12)


def test_area_resample_errors():
    with pytest.raises(ShapeError):
        area_resample(np.zeros((0, 3, 3)))
    with pytest.raises(ShapeError):
        area_resample(np.zeros((3, 3)))


def test_grid_from_order():
    dims = (2, 1, 3)
    values = list(range(6))  # t-major, then y, then x
    arr = grid_from_order(values, dims)
    assert arr.shape == (2, 1, 3)
    assert arr[1, 0, 0] == 1 and arr[0, 0, 2] == 4
    with pytest.raises(ShapeError):
        grid_from_order(values[:5], dims)


def test_tensor_assembly_shapes(rng):
    q = assemble_quality_tensor(rng.normal(size=(3, 2, 4)))
    assert q.values.shape == GRID
    f = assemble_feature_tensor(rng.normal(size=(3, 2, 4, 7)))
    assert f.values.shape == GRID + (7,) and f.channels == 7
    with pytest.raises(ShapeError):
        assemble_quality_tensor(np.zeros((3, 2)))
    with pytest.raises(NumericError):
        assemble_quality_tensor(np.full((2, 2, 2), np.nan))


def _model(seed=0, channels=6, dtype=torch.float64):
    torch.manual_seed(seed)
    return STANet(STAConfig(in_channels=channels)).to(dtype)


def test_single_patch_sequence_returns_its_score(rng):
    model = _model()
    q = assemble_quality_tensor(np.full((1, 1, 1), 42.5))
    f = assemble_feature_tensor(rng.normal(size=(1, 1, 1, 6)))
    assert abs(aggregate(q, f, model) - 42.5) < 1e-9


def test_zero_logits_give_mean_quality(rng):
    model = _model()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    q = rng.normal(size=GRID)
    f = rng.normal(size=GRID + (6,))
    assert abs(aggregate(q, f, model) - q.mean()) < 1e-12
    np.testing.assert_allclose(aggregation_weights(f, model), 1.0 / np.prod(GRID))


def test_logit_shift_invariance(rng):
    model = _model(1)
    q, f = rng.normal(size=GRID), rng.normal(size=GRID + (6,))
    before = aggregate(q, f, model)
    with torch.no_grad():
        model.project.bias.add_(17.0)
    assert abs(aggregate(q, f, model) - before) < 1e-12


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
@settings(max_examples=25, deadline=None)
def test_convexity(seed, c):
    model = _model(seed % 1000)
    rng = np.random.default_rng(seed)
    q, f = rng.normal(size=GRID) * 10, rng.normal(size=GRID + (6,)) * 3
    w = aggregation_weights(f, model)
    assert abs(w.sum() - 1) < 1e-6 and np.all(w >= 0)
    out = aggregate(q, f, model)
    assert q.min() - 1e-9 <= out <= q.max() + 1e-9
    assert abs(aggregate(np.full(GRID, c), f, model) - c) < 1e-5


def test_shape_and_value_errors(rng):
    model = _model()
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 16, 9, 9, dtype=torch.float64), torch.zeros(1, 16, 9, 10, 6, dtype=torch.float64))
    with pytest.raises(ShapeError):
        model(torch.zeros(1, *GRID, dtype=torch.float64), torch.zeros(1, *GRID, 5, dtype=torch.float64))
    f = rng.normal(size=GRID + (6,))
    f[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        aggregate(np.zeros(GRID), f, model)


def test_gradients_match_differences(rng):
    model = _model(3, channels=44)
    q = torch.as_tensor(rng.normal(size=(2,) + GRID))
    f = torch.as_tensor(rng.normal(size=(2,) + GRID + (44,)))
    fn = lambda: model(q, f).sum()  # noqa: E731
    for i, conv in enumerate((*model.block1, *model.block2, model.project)):
        _, _, rel = directional_check(fn, list(conv.parameters()), seed=i)
        assert rel < 1e-3, i
