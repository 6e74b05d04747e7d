"""Finite-difference gradient suite: every differentiable op, 20 randomized instances each."""
import time
import zlib

import numpy as np
import pytest

from nerfrestore.autodiff import backward, float64_mode, functional as F, no_grad
from nerfrestore.diffusion import ConditionalDenoiser, DiffusionConfig, diffusion_loss
from nerfrestore.radiance_field import VoxelGrid, trilinear_lookup, volume_render

from gradcheck import check_gradients, relative_error

INSTANCES = 20
TOLERANCE = 1e-4


def u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, shape)


def away_from_zero(rng, *shape):
    x = u(rng, *shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


def small_shape(rng):
    return tuple(int(s) for s in rng.integers(1, 5, size=2))


def _conv_case(stride, k):
    def build(rng):
        n, cin, cout = (int(v) for v in rng.integers(1, 3, size=3))
        hw = int(rng.integers(3, 6)) * stride
        return (lambda x, w, b: F.conv2d(x, w, b, stride=stride),
                [u(rng, n, cin, hw, hw), u(rng, cout, cin, k, k), u(rng, cout)])
    return build


def _trilinear(rng):
    r = int(rng.integers(2, 5))
    grid = VoxelGrid(r, rng=rng)
    idx, wts = grid.corner_weights(rng.uniform(0, 1, (int(rng.integers(3, 12)), 3)))
    return (lambda v: trilinear_lookup(v, idx, wts)), [u(rng, r ** 3, 4)]


def _volume_render(rng):
    rays, samples = int(rng.integers(1, 4)), int(rng.integers(2, 7))
    delta = rng.uniform(0.05, 0.5, (rays, samples))
    bg = rng.uniform(0, 1, 3)
    return (lambda s, c: volume_render(s, c, delta, bg)[0],
            [rng.uniform(0.0, 4.0, (rays, samples)), rng.uniform(0, 1, (rays, samples, 3))])


OPS = {
    "add": lambda rng: (lambda a, b: F.add(a, b), [u(rng, *(s := small_shape(rng))), u(rng, *s)]),
    "add_scalar": lambda rng: (lambda a: F.add(a, 1.7), [u(rng, *small_shape(rng))]),
    "sub": lambda rng: (lambda a, b: F.sub(a, b), [u(rng, *(s := small_shape(rng))), u(rng, *s)]),
    "mul": lambda rng: (lambda a, b: F.mul(a, b), [u(rng, *(s := small_shape(rng))), u(rng, *s)]),
    "mul_scalar": lambda rng: (lambda a: F.mul(a, -0.3), [u(rng, *small_shape(rng))]),
    "div": lambda rng: (lambda a, b: F.div(a, b), [u(rng, *(s := small_shape(rng))),
                                                   rng.uniform(0.5, 2, s) * rng.choice([-1, 1], s)]),
    "neg": lambda rng: (F.neg, [u(rng, *small_shape(rng))]),
    "square": lambda rng: (F.square, [u(rng, *small_shape(rng))]),
    "exp": lambda rng: (F.exp, [u(rng, *small_shape(rng))]),
    "log": lambda rng: (F.log, [rng.uniform(0.2, 2, small_shape(rng))]),
    "sqrt": lambda rng: (F.sqrt, [rng.uniform(0.2, 2, small_shape(rng))]),
    "abs": lambda rng: (F.abs, [away_from_zero(rng, *small_shape(rng))]),
    "relu": lambda rng: (F.relu, [away_from_zero(rng, *small_shape(rng))]),
    "leaky_relu": lambda rng: (F.leaky_relu, [away_from_zero(rng, *small_shape(rng))]),
    "sigmoid": lambda rng: (F.sigmoid, [u(rng, *small_shape(rng))]),
    "silu": lambda rng: (F.silu, [u(rng, *small_shape(rng))]),
    "tanh": lambda rng: (F.tanh, [u(rng, *small_shape(rng))]),
    "softplus": lambda rng: (F.softplus, [u(rng, *small_shape(rng))]),
    "log_sigmoid": lambda rng: (F.log_sigmoid, [u(rng, *small_shape(rng))]),
    "sum_all": lambda rng: (F.sum, [u(rng, *small_shape(rng))]),
    "sum_axis": lambda rng: (lambda a: F.sum(a, axis=1), [u(rng, 2, *small_shape(rng))]),
    "mean_axis": lambda rng: (lambda a: F.mean(a, axis=(0, 2)), [u(rng, 2, *small_shape(rng))]),
    "cumsum_exclusive": lambda rng: (lambda a: F.cumsum(a, axis=1, exclusive=True), [u(rng, 3, 5)]),
    "reshape": lambda rng: (lambda a: F.reshape(a, (-1,)), [u(rng, *small_shape(rng))]),
    "transpose": lambda rng: (lambda a: F.transpose(a, (2, 0, 1)), [u(rng, 2, 3, 4)]),
    "broadcast_to": lambda rng: (lambda a: F.broadcast_to(a, (2, 3, 4)), [u(rng, 3, 1)]),
    "concat": lambda rng: (lambda a, b: F.concat([a, b], axis=1), [u(rng, 2, 3), u(rng, 2, int(rng.integers(1, 4)))]),
    "slice": lambda rng: (lambda a: a[1:, ::2], [u(rng, 4, 5)]),
    "gather_rows": lambda rng: (lambda a, idx=rng.integers(0, 4, (3, 2)): F.gather_rows(a, idx), [u(rng, 4, 3)]),
    "matmul": lambda rng: (F.matmul, [u(rng, int(rng.integers(1, 5)), 3), u(rng, 3, int(rng.integers(1, 5)))]),
    "linear": lambda rng: (F.linear, [u(rng, 3, 4), u(rng, 5, 4), u(rng, 5)]),
    "conv2d_3x3": _conv_case(1, 3),
    "conv2d_3x3_stride2": _conv_case(2, 3),
    "conv2d_1x1": _conv_case(1, 1),
    "upsample2x": lambda rng: (F.upsample2x, [u(rng, 1, 2, 3, 3)]),
    "group_norm": lambda rng: (lambda x, g, b: F.group_norm(x, 2, g, b), [u(rng, 2, 4, 3, 3), u(rng, 4), u(rng, 4)]),
    "channel_bias": lambda rng: (F.channel_bias, [u(rng, 2, 3, 2, 2), u(rng, 2, 3)]),
    "mse": lambda rng: (F.mse, [u(rng, *(s := small_shape(rng))), u(rng, *s)]),
    "l1": lambda rng: (F.l1, [away_from_zero(rng, *(s := small_shape(rng))), np.zeros(s)]),
    "trilinear_lookup": _trilinear,
    "volume_render": _volume_render,
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradient_matches_finite_difference(op):
    worst = 0.0
    for instance in range(INSTANCES):
        rng = np.random.default_rng([zlib.crc32(op.encode()), instance])
        fn, arrays = OPS[op](rng)
        worst = max(worst, check_gradients(fn, arrays, rng))
    assert worst < TOLERANCE, f"{op}: worst relative error {worst:.2e}"


def miniature_denoiser(seed: int) -> ConditionalDenoiser:
    with float64_mode():
        den = ConditionalDenoiser(DiffusionConfig(latent_channels=2, channels=(4, 4, 4), temb_dim=8, T=50), seed)
    rng = np.random.default_rng(seed)
    for head in den.sft.heads:  # move off the zero init so every SFT weight carries gradient
        head.conv2.weight.data = rng.normal(0, 0.3, head.conv2.weight.shape)
    return den


def test_diffusion_loss_gradient_wrt_sft_heads():
    start = time.perf_counter()
    worst = 0.0
    for instance in range(INSTANCES):
        den = miniature_denoiser(instance)
        rng = np.random.default_rng(instance)
        z_hq = rng.normal(size=(1, 2, 4, 4))
        z_lq = rng.normal(size=(1, 2, 4, 4))
        names = sorted(den.sft.named_parameters())
        pick = [names[i] for i in rng.choice(len(names), 2, replace=False)]
        worst = max(worst, _check_param_gradients(den, pick, z_hq, z_lq, rng))
    assert worst < TOLERANCE, f"worst relative error {worst:.2e}"
    assert time.perf_counter() - start < 60


def _check_param_gradients(den, names, z_hq, z_lq, rng, coords=6, h=1e-5) -> float:
    """Finite differences of the diffusion loss w.r.t. selected SFT parameter entries."""

    params = den.sft.named_parameters()
    for p in den.parameters():
        p.requires_grad = False
        p.grad = None
    for n in names:
        params[n].requires_grad = True
        params[n].data = params[n].data.astype(np.float64)

    def loss(grad: bool):
        if grad:
            return diffusion_loss(den.predict_noise, z_hq, z_lq, np.random.default_rng(99), den.schedule)
        with no_grad():
            return float(diffusion_loss(den.predict_noise, z_hq, z_lq, np.random.default_rng(99), den.schedule).data)

    with float64_mode():
        backward(loss(True))
        worst = 0.0
        for n in names:
            p = params[n]
            flat = rng.choice(p.data.size, min(coords, p.data.size), replace=False)
            numeric = np.zeros(len(flat))
            for j, i in enumerate(flat):
                idx = np.unravel_index(i, p.shape)
                old = p.data[idx]
                p.data[idx] = old + h
                fp = loss(False)
                p.data[idx] = old - h
                fm = loss(False)
                p.data[idx] = old
                numeric[j] = (fp - fm) / (2 * h)
            worst = max(worst, relative_error(numeric, p.grad.reshape(-1)[flat]))
    return worst
