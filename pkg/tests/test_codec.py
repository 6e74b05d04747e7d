import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nerfrestore.autodiff import ShapeError, Tensor, no_grad
from nerfrestore.codec import Codec, CodecConfig, latent_scale_for, random_patches, to_nchw, train_codec
from nerfrestore.pipeline.metrics import psnr


@pytest.fixture(scope="module")
def codec():
    return Codec(CodecConfig(), seed=0)


def test_config_rejects_non_power_of_two_factor():
    with pytest.raises(ValueError, match="power of two"):
        CodecConfig(factor=6)
    with pytest.raises(ValueError, match="tap level"):
        CodecConfig(factor=4, tap_levels=(3,))


def test_latent_shape_for_128_image(codec):
    with no_grad():
        z, taps = codec.encode(Tensor(np.zeros((1, 3, 128, 128), np.float32)))
    assert z.shape == (1, 4, 32, 32)
    assert sorted(taps) == [0, 1, 2]


def test_paper_scale_factor_gives_64_latent():
    cfg = CodecConfig(factor=8, base_channels=8, tap_levels=(1,))
    with no_grad():
        z, _ = Codec(cfg).encode(Tensor(np.zeros((1, 3, 512, 512), np.float32)))
    assert z.shape[2:] == (64, 64)


def test_unpadded_input_rejected_with_hint(codec):
    with pytest.raises(ShapeError, match="pad"):
        codec.encode(Tensor(np.zeros((1, 3, 30, 32), np.float32)))


def test_encoding_is_deterministic(codec, rng):
    x = Tensor(rng.uniform(size=(2, 3, 16, 16)).astype(np.float32))
    with no_grad():
        a, _ = codec.encode(x)
        b, _ = codec.encode(x)
    np.testing.assert_array_equal(a.data, b.data)


@settings(max_examples=10)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4))
def test_round_trip_preserves_shape_and_range(n, hq, wq):
    codec = Codec(CodecConfig(base_channels=8), seed=1)
    x = Tensor(np.random.default_rng(n).uniform(size=(n, 3, 4 * hq, 4 * wq)).astype(np.float32))
    with no_grad():
        out = codec(x)
    assert out.shape == x.shape
    assert np.all((out.data >= 0) & (out.data <= 1))


def test_zero_latent_decodes_to_valid_image(codec):
    with no_grad():
        img = codec.decode(Tensor(np.zeros((1, 4, 8, 8), np.float32)))
    assert np.all(np.isfinite(img.data)) and img.data.min() >= 0 and img.data.max() <= 1


def test_decode_checks_latent_channels(codec):
    with pytest.raises(ShapeError):
        codec.decode(Tensor(np.zeros((1, 3, 8, 8), np.float32)))


def test_encoder_and_decoder_taps_share_spatial_size(codec):
    with no_grad():
        z, enc = codec.encode(Tensor(np.zeros((1, 3, 32, 32), np.float32)))
        _, dec = codec.decode_with_taps(z)
    for level in codec.cfg.tap_levels:
        assert enc[level].shape == dec[level].shape


def test_training_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        train_codec(Codec(CodecConfig(base_channels=8)), [], steps=1)


def small_images(seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:48, 0:48] / 48.0
    base = np.stack([0.5 + 0.4 * np.sin(6 * xx), 0.5 + 0.4 * np.cos(5 * yy), 0.5 + 0.2 * np.sin(3 * (xx + yy))], -1)
    return [np.clip(base + rng.normal(0, 0.02, base.shape), 0, 1).astype(np.float32) for _ in range(2)]


def test_short_training_lowers_loss_and_is_reproducible():
    imgs = small_images()
    runs = []
    for _ in range(2):
        codec = Codec(CodecConfig(base_channels=8), seed=3)
        curve = train_codec(codec, imgs, steps=40, batch=4, lr=2e-3, patch=16, seed=3)
        runs.append((curve, codec.named_parameters(), codec.latent_scale))
    (curve, params, scale), (_, params2, scale2) = runs
    assert np.mean(curve[-5:]) < np.mean(curve[:5])
    assert scale == scale2
    for name in params:
        np.testing.assert_array_equal(params[name].data, params2[name].data)


def test_latent_scale_standardizes_latents():
    imgs = small_images()
    codec = Codec(CodecConfig(base_channels=8), seed=2)
    codec.latent_scale = latent_scale_for(codec, imgs, np.random.default_rng(0))
    with no_grad():
        z, _ = codec.encode(Tensor(random_patches(imgs, np.random.default_rng(1), 32, 32, flip=False)))
    assert abs(float(z.data.std()) - 1.0) < 0.1


# ---------------------------------------------------------------- trained codec (reference run)


@pytest.mark.slow
def test_trained_codec_reconstructs_held_in_patches(reference_codec, reference_viewset):
    codec = reference_codec
    imgs = [reference_viewset.images[i] for i in reference_viewset.indices("train")]
    x = random_patches(imgs, np.random.default_rng(77), 64, 32, flip=False)
    with no_grad():
        rec = codec(Tensor(x)).data
    assert psnr(rec, x) >= 25.0


@pytest.mark.slow
def test_trained_codec_reconstructs_flat_patches_better_than_busy_ones(reference_codec):
    codec = reference_codec
    flat = np.full((32, 32, 3), 0.6, np.float32)
    yy, xx = np.mgrid[0:32, 0:32]
    busy = np.repeat((((yy // 2) + (xx // 2)) % 2)[..., None], 3, axis=-1).astype(np.float32)
    with no_grad():
        errs = [float(np.abs(codec(Tensor(to_nchw(p))).data - to_nchw(p)).mean()) for p in (flat, busy)]
    assert errs[0] < errs[1]
