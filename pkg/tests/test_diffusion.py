import numpy as np
import pytest
from hypothesis import given, strategies as st

from nerfrestore.autodiff import AdamState, ShapeError, Tensor, adam_step, backward, no_grad
from nerfrestore.diffusion import (
    ConditionalDenoiser,
    DiffusionConfig,
    NoiseSchedule,
    SFTHead,
    ddim_step,
    ddpm_step,
    diffusion_loss,
    modulate,
    q_sample,
    reverse_sample,
    sampling_timesteps,
    sft_apply,
    stage1_loss,
)

SMALL = DiffusionConfig(channels=(8, 8, 16), temb_dim=16, T=100)


@pytest.fixture(scope="module")
def schedule():
    return NoiseSchedule()


@pytest.fixture(scope="module")
def denoiser():
    return ConditionalDenoiser(SMALL, seed=0)


# ---------------------------------------------------------------- schedule


def test_schedule_tables(schedule):
    betas = schedule.betas[1:]
    assert np.all((betas > 0) & (betas < 1)) and np.all(np.diff(betas) >= 0)
    ab = schedule.alpha_bars[1:]
    assert np.all(np.diff(ab) < 0)
    assert ab[0] > 0.999 and ab[-1] < 1e-4
    assert np.all(np.isfinite(schedule.alpha_bars))


def test_q_sample_examples(schedule, rng):
    z0 = rng.normal(size=(2, 4, 8, 8))
    np.testing.assert_allclose(q_sample(z0, 500, np.zeros_like(z0), schedule), np.sqrt(schedule.alpha_bars[500]) * z0)
    eps = rng.normal(size=z0.shape)
    np.testing.assert_allclose(q_sample(z0, 1000, eps, schedule), eps, atol=0.01 * np.abs(z0).max())
    with pytest.raises(ValueError):
        q_sample(z0, 0, eps, schedule)
    with pytest.raises(ValueError):
        q_sample(z0, 1001, eps, schedule)


@given(st.integers(1, 1000))
def test_q_sample_preserves_unit_variance(t):
    schedule = NoiseSchedule()
    rng = np.random.default_rng(t)
    z0, eps = rng.standard_normal(10_000), rng.standard_normal(10_000)
    assert abs(q_sample(z0, t, eps, schedule).var() - 1.0) < 0.05


def test_timesteps_strictly_decrease_to_zero():
    ts = sampling_timesteps(1000, 20)
    assert ts[0] == 1000 and ts[-1] == 0 and len(ts) == 21 and np.all(np.diff(ts) < 0)


# ---------------------------------------------------------------- steppers


@given(st.integers(1, 1000), st.integers(0, 2**31 - 1))
def test_single_ddim_jump_with_true_noise_recovers_clean_latent(t, seed):
    schedule = NoiseSchedule()
    rng = np.random.default_rng(seed)
    z0, eps = rng.standard_normal((4, 8, 8)), rng.standard_normal((4, 8, 8))
    rec = ddim_step(q_sample(z0, t, eps, schedule), eps, t, 0, schedule)
    assert np.max(np.abs(rec - z0)) < 1e-5


def test_step_boundaries(schedule, rng):
    z = rng.normal(size=(1, 4, 2, 2))
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 10, schedule)
    with pytest.raises(ValueError):
        ddpm_step(z, z, 10, rng, schedule, t_prev=12)
    x0 = (z - np.sqrt(1 - schedule.alpha_bars[10]) * z) / np.sqrt(schedule.alpha_bars[10])
    np.testing.assert_allclose(ddim_step(z, z, 10, 0, schedule), x0)


def test_ddpm_last_step_is_noise_free(schedule, rng):
    z, eps = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    a = ddpm_step(z, eps, 1, np.random.default_rng(0), schedule)
    b = ddpm_step(z, eps, 1, np.random.default_rng(1), schedule)
    np.testing.assert_array_equal(a, b)


def test_ddim_reverse_pass_is_deterministic(denoiser, rng):
    cond = rng.normal(size=(1, 4, 8, 8)).astype(np.float32)

    def predict(z, t):
        with no_grad():
            return denoiser.predict_noise(Tensor(z), t, Tensor(cond)).data

    a = reverse_sample(predict, cond.shape, denoiser.schedule, "ddim", 5, seed=3)
    b = reverse_sample(predict, cond.shape, denoiser.schedule, "ddim", 5, seed=3)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- SFT and the denoiser


def test_modulation_arithmetic(rng):
    f = Tensor(rng.normal(size=(1, 2, 3, 3)))
    zero, one = Tensor(np.zeros(f.shape)), Tensor(np.ones(f.shape))
    np.testing.assert_array_equal(modulate(f, zero, zero).data, f.data)
    np.testing.assert_array_equal(modulate(f, one, zero).data, 2 * f.data)


def test_sft_head_rejects_scale_mismatch(rng):
    head = SFTHead(8, rng)
    with pytest.raises(ShapeError):
        sft_apply(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((1, 8, 2, 2))), head)


def test_zero_initialized_sft_leaves_unet_output_bit_identical(denoiser, rng):
    z_t = Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32))
    z_lq = Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32))
    with no_grad():
        cond = denoiser.predict_noise(z_t, np.array([5, 70]), z_lq)
        uncond = denoiser.predict_noise(z_t, np.array([5, 70]))
    np.testing.assert_array_equal(cond.data, uncond.data)


def test_condition_features_match_unet_scales(denoiser):
    with no_grad():
        feats = denoiser.cond_encoder(Tensor(np.zeros((1, 4, 8, 8), np.float32)), 10)
    assert [f.shape for f in feats.values()] == [(1, 8, 8, 8), (1, 8, 4, 4), (1, 16, 2, 2)]


def test_predict_noise_shape_contract(denoiser):
    with no_grad():
        out = denoiser.predict_noise(Tensor(np.zeros((3, 4, 8, 8), np.float32)), 7, np.ones((3, 4, 8, 8), np.float32))
    assert out.shape == (3, 4, 8, 8)
    with pytest.raises(ShapeError):
        denoiser.predict_noise(Tensor(np.zeros((1, 4, 8, 8))), 7, Tensor(np.zeros((1, 4, 4, 4))))


def test_conditioning_is_live_after_training(rng):
    den = ConditionalDenoiser(SMALL, seed=5)
    for p in den.unet.parameters():
        p.requires_grad = False
    params = {**den.cond_encoder.named_parameters(), **den.sft.named_parameters()}
    state = AdamState(lr=1e-3)
    z_hq = rng.normal(size=(4, 4, 8, 8)).astype(np.float32)
    z_lq = (z_hq + rng.normal(0, 0.3, z_hq.shape)).astype(np.float32)
    for _ in range(15):
        backward(diffusion_loss(den.predict_noise, z_hq, z_lq, rng, den.schedule))
        adam_step(params, state)
    z_t = Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32))
    with no_grad():
        a = den.predict_noise(z_t, 50, Tensor(z_lq[:1])).data
        b = den.predict_noise(z_t, 50, Tensor(z_lq[1:2])).data
    assert np.mean(np.abs(a - b)) > 0


# ---------------------------------------------------------------- losses


def test_oracle_denoiser_has_zero_loss(schedule, rng):
    z_hq = rng.normal(size=(3, 4, 4, 4))

    def oracle(z_t, t, z_lq):
        ab = schedule.alpha_bars[t].reshape(-1, 1, 1, 1)
        return Tensor((z_t.data - np.sqrt(ab) * z_hq) / np.sqrt(1 - ab))

    assert float(diffusion_loss(oracle, z_hq, None, rng, schedule).data) < 1e-20


def test_zero_predictor_loss_is_about_one(schedule):
    zero = lambda z_t, t, z_lq: Tensor(np.zeros(z_t.shape))  # noqa: E731
    loss = diffusion_loss(zero, np.zeros((8, 4, 16, 16)), None, np.random.default_rng(0), schedule)
    assert abs(float(loss.data) - 1.0) < 0.02


def test_initial_loss_is_finite_and_positive(denoiser, rng):
    z = rng.normal(size=(2, 4, 8, 8)).astype(np.float32)
    val = float(diffusion_loss(denoiser.predict_noise, z, z, rng, denoiser.schedule).data)
    assert np.isfinite(val) and val > 0


def test_stage1_loss_combination():
    nerf, diff = Tensor(np.array(0.2)), Tensor(np.array(0.5))
    assert float(stage1_loss(nerf, diff, 1.0).data) == pytest.approx(0.7)
    assert stage1_loss(nerf, diff, 0.0) is nerf
    assert stage1_loss(nerf, None) is nerf
