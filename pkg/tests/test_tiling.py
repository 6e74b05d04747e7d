import numpy as np
import pytest
from hypothesis import given, strategies as st

from nerfrestore.diffusion import NoiseSchedule, reverse_sample
from nerfrestore.tiling import aggregate_noise, make_layout, place, tiled_reverse_sample


@st.composite
def layouts(draw):
    h = draw(st.integers(4, 40))
    w = draw(st.integers(4, 40))
    tile = draw(st.integers(2, min(h, w)))
    stride = draw(st.integers(1, tile))
    sigma = tile * draw(st.floats(0.1, 1.0))
    return make_layout((h, w), tile, stride, sigma)


def normalized_weight_sum(layout):
    return sum(layout.weight_map(n) for n in range(len(layout))) / layout.normalizer


def test_counting_example():
    layout = make_layout((32, 32), tile=16, stride=8)
    assert len(layout) == 9
    assert sorted({y for y, _ in layout.regions}) == [0, 8, 16]


def test_default_stride_and_sigma():
    layout = make_layout((16, 16), tile=8)
    assert layout.stride == 4 and layout.sigma == 2.0


def test_layout_argument_errors():
    with pytest.raises(ValueError, match="larger"):
        make_layout((8, 8), tile=9)
    with pytest.raises(ValueError):
        make_layout((8, 8), tile=4, stride=5)
    with pytest.raises(ValueError, match="underflow"):
        make_layout((40, 40), tile=32, sigma=0.5)


@given(layouts())
def test_normalized_weights_sum_to_one(layout):
    np.testing.assert_allclose(normalized_weight_sum(layout), 1.0, atol=1e-6)
    assert np.all(layout.normalizer > 0)


@given(layouts())
def test_last_tile_is_flush_with_border(layout):
    assert max(y for y, _ in layout.regions) == layout.height - layout.tile
    assert max(x for _, x in layout.regions) == layout.width - layout.tile


@given(layouts(), st.integers(0, 1000))
def test_placement_inverts_extraction(layout, seed):
    full = np.random.default_rng(seed).normal(size=(2, layout.height, layout.width))
    tiles = layout.extract(full)
    for n, (y, x) in enumerate(layout.regions):
        placed = place(tiles[n], (y, x), (layout.height, layout.width))
        t = layout.tile
        np.testing.assert_array_equal(placed[:, y : y + t, x : x + t], full[:, y : y + t, x : x + t])


def test_single_tile_layout_has_unit_weights():
    layout = make_layout((8, 8), tile=8)
    assert len(layout) == 1
    np.testing.assert_allclose(layout.window / layout.normalizer, 1.0)


@given(layouts(), st.floats(-3, 3))
def test_constant_predictions_aggregate_to_constant(layout, c):
    preds = np.full((len(layout), 3, layout.tile, layout.tile), c)
    np.testing.assert_allclose(aggregate_noise(preds, layout), c, atol=1e-9)


@given(layouts(), st.integers(0, 1000))
def test_aggregate_is_a_convex_combination(layout, seed):
    preds = np.random.default_rng(seed).normal(size=(len(layout), 1, layout.tile, layout.tile))
    lo = np.full((layout.height, layout.width), np.inf)
    hi = -lo
    for n, (y, x) in enumerate(layout.regions):
        t = layout.tile
        lo[y : y + t, x : x + t] = np.minimum(lo[y : y + t, x : x + t], preds[n, 0])
        hi[y : y + t, x : x + t] = np.maximum(hi[y : y + t, x : x + t], preds[n, 0])
    agg = aggregate_noise(preds, layout)[0]
    assert np.all(agg >= lo - 1e-12) and np.all(agg <= hi + 1e-12)


def test_single_tile_aggregate_is_exact(rng):
    layout = make_layout((8, 8), tile=8)
    pred = rng.normal(size=(1, 4, 8, 8))
    np.testing.assert_array_equal(aggregate_noise(pred, layout), pred[0])


def test_aggregate_rejects_wrong_tile_count():
    layout = make_layout((16, 16), tile=8)
    with pytest.raises(ValueError):
        aggregate_noise(np.zeros((len(layout) + 1, 4, 8, 8)), layout)


def pixelwise(z, cond):
    # 1x1 receptive field: each output location depends only on the same input location
    return np.tanh(0.7 * z - 0.3 * cond) + 0.1 * z * cond


def pixelwise_tiles(z_tiles, cond_tiles, t):
    return pixelwise(z_tiles, cond_tiles)


@given(layouts(), st.integers(0, 1000))
def test_pixelwise_denoiser_aggregate_matches_full_prediction(layout, seed):
    rng = np.random.default_rng(seed)
    z, cond = rng.normal(size=(2, 4, layout.height, layout.width))
    agg = aggregate_noise(pixelwise(layout.extract(z), layout.extract(cond)), layout)
    assert np.max(np.abs(agg - pixelwise(z, cond))) < 1e-5


def test_tiled_sampling_matches_full_image_for_pixelwise_denoiser(rng):
    schedule = NoiseSchedule()
    cond = rng.normal(size=(1, 4, 32, 32))
    layout = make_layout((32, 32), tile=8)
    tiled = tiled_reverse_sample(pixelwise_tiles, cond, layout, schedule, "ddim", 20, seed=11)
    full = reverse_sample(lambda z, t: pixelwise(z, cond), cond.shape, schedule, "ddim", 20, seed=11, dtype=cond.dtype)
    assert np.max(np.abs(tiled - full)) < 1e-4


def test_one_tile_layout_is_bit_identical_to_plain_sampling(rng):
    schedule = NoiseSchedule()
    cond = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)
    tiled = tiled_reverse_sample(pixelwise_tiles, cond, make_layout((8, 8), tile=8), schedule, "ddim", 20, seed=2)
    full = reverse_sample(lambda z, t: pixelwise(z, cond), cond.shape, schedule, "ddim", 20, seed=2)
    np.testing.assert_array_equal(tiled, full)


def test_tiled_sampling_is_deterministic(rng):
    schedule = NoiseSchedule()
    cond = rng.normal(size=(1, 4, 16, 16))
    layout = make_layout((16, 16), tile=8)
    a = tiled_reverse_sample(pixelwise_tiles, cond, layout, schedule, "ddim", 10, seed=5)
    b = tiled_reverse_sample(pixelwise_tiles, cond, layout, schedule, "ddim", 10, seed=5)
    np.testing.assert_array_equal(a, b)
