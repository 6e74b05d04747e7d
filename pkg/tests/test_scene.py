import numpy as np
import pytest
from hypothesis import given, strategies as st

from nerfrestore.pipeline.metrics import total_variation
from nerfrestore.scene import (
    OPAQUE_DENSITY,
    SCENE_CENTER,
    AnalyticScene,
    Box,
    Camera,
    Sphere,
    Texture,
    default_scene,
    generate_viewset,
    render_reference,
    scene_radiance,
)

RED = (1.0, 0.0, 0.0)


def test_empty_space_returns_background():
    scene = default_scene()
    density, rgb = scene_radiance(np.array([[0.02, 0.02, 0.95]]), scene)
    assert density[0] == 0.0
    np.testing.assert_array_equal(rgb[0], scene.background)


def test_checker_boundary_uses_floor_indexing():
    tex = Texture("checker", 2.0, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    scene = AnalyticScene((Box((0, 0, 0), (1, 1, 1), tex),))
    # 2 cycles per unit: cells are 0.25 wide, so x = 0.25 sits exactly on a boundary
    p = np.array([[0.25, 0.1, 0.1]])
    _, rgb = scene_radiance(p, scene)
    expected_cell = int(np.floor(2 * 2.0 * 0.25)) + 0 + 0
    np.testing.assert_array_equal(rgb[0], np.full(3, expected_cell % 2, dtype=float))


@given(st.floats(0.31, 0.81))
def test_sphere_stripe_colour_matches_formula(z):
    scene = default_scene()
    ball = scene.primitives[1]
    p = np.array([[0.5, 0.5, z]])
    density, rgb = scene_radiance(p, scene)
    mix = 0.5 + 0.5 * np.sin(2 * np.pi * ball.texture.freq * z)
    a, b = np.array(ball.texture.color_a), np.array(ball.texture.color_b)
    assert density[0] == OPAQUE_DENSITY
    np.testing.assert_allclose(rgb[0], a + (b - a) * mix, atol=1e-12)


def test_first_primitive_wins_on_overlap():
    t_red = Texture("checker", 1.0, RED, RED)
    t_blue = Texture("checker", 1.0, (0, 0, 1), (0, 0, 1))
    scene = AnalyticScene((Box((0.2, 0.2, 0.2), (0.6, 0.6, 0.6), t_red), Sphere((0.5, 0.5, 0.5), 0.2, t_blue)))
    _, rgb = scene_radiance(np.array([[0.5, 0.5, 0.5]]), scene)
    np.testing.assert_array_equal(rgb[0], RED)


def test_primitives_must_fit_the_unit_cube():
    with pytest.raises(ValueError, match="unit cube"):
        AnalyticScene((Sphere((0.9, 0.5, 0.5), 0.2, Texture("stripes", 3.0, RED, RED)),))


def test_texture_frequency_must_be_positive():
    with pytest.raises(ValueError):
        Texture("stripes", 0.0, RED, RED)


def test_camera_rejects_degenerate_setups():
    with pytest.raises(ValueError, match="parallel"):
        Camera((0.5, 0.5, 2.0), (0.5, 0.5, 0.0), up=(0, 0, 1))
    with pytest.raises(ValueError, match="fov"):
        Camera((0, 0, 2), (0, 0, 0), up=(0, 1, 0), fov_y=np.pi)


def top_down_camera(res=16, fov_deg=20.0):
    return Camera((0.5, 0.5, 2.5), (0.5, 0.5, 0.0), up=(0, 1, 0), fov_y=np.deg2rad(fov_deg), width=res, height=res)


def test_empty_scene_renders_uniform_background():
    scene = AnalyticScene((), background=(0.2, 0.4, 0.6))
    img = render_reference(top_down_camera(), scene, spp=2, samples_per_ray=16)
    np.testing.assert_allclose(img, np.broadcast_to((0.2, 0.4, 0.6), img.shape), atol=1e-12)


def test_opaque_red_box_filling_frustum_renders_red():
    scene = AnalyticScene((Box((0, 0, 0), (1, 1, 1), Texture("checker", 1.0, RED, RED)),), background=(0, 0, 1))
    img = render_reference(top_down_camera(fov_deg=15.0), scene, spp=2, samples_per_ray=64)
    np.testing.assert_allclose(img, np.broadcast_to(RED, img.shape), atol=1e-6)


def checker_scene(freq=20.0):
    tex = Texture("checker", freq, (0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
    return AnalyticScene((Box((0, 0, 0), (1, 1, 0.2), tex),))


def test_supersampling_lowers_total_variation_on_fine_checker():
    cam = top_down_camera(res=32, fov_deg=30.0)
    tv1 = total_variation(render_reference(cam, checker_scene(), spp=1, samples_per_ray=48, seed=3))
    tv16 = total_variation(render_reference(cam, checker_scene(), spp=16, samples_per_ray=48, seed=3))
    assert tv16 < tv1


def test_more_samples_per_pixel_do_not_raise_pixel_variance():
    cam = top_down_camera(res=12, fov_deg=30.0)
    scene = checker_scene()

    def per_pixel_variance(spp):
        renders = np.stack([render_reference(cam, scene, spp=spp, samples_per_ray=32, seed=s) for s in range(6)])
        return renders.var(axis=0).mean(axis=-1)  # (H, W), 144 pixels

    v1, v8 = per_pixel_variance(1), per_pixel_variance(8)
    assert v8.mean() <= v1.mean()


def test_reference_pixels_lie_in_unit_range():
    img = render_reference(top_down_camera(), default_scene(), spp=2, samples_per_ray=32)
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_viewset_counts_splits_and_determinism():
    a = generate_viewset(default_scene(), n_train=8, n_test=2, resolution=8, spp=1, seed=4, samples_per_ray=16)
    b = generate_viewset(default_scene(), n_train=8, n_test=2, resolution=8, spp=1, seed=4, samples_per_ray=16)
    assert len(a.cameras) == 10
    assert set(a.indices("train")).isdisjoint(a.indices("test"))
    assert len(a.indices("test")) == 2
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)


def test_cameras_look_at_scene_centre():
    vs = generate_viewset(default_scene(), 12, 4, resolution=4, spp=1, seed=0, samples_per_ray=4)
    for cam in vs.cameras:
        _, _, fwd = cam.basis()
        to_centre = np.asarray(SCENE_CENTER) - np.asarray(cam.position)
        cos = fwd @ to_centre / np.linalg.norm(to_centre)
        assert np.degrees(np.arccos(np.clip(cos, -1, 1))) < 30.0
