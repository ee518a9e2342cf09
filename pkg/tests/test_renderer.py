import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poserefine import diffmath as dm
from poserefine.imageio import read_ppm
from poserefine.renderer import (CameraModel, bounding_sphere, composite, composite_weights, generate_ray,
                                 generate_rays, ray_sphere_bounds, sample_along_ray, sample_along_rays, save_render)


def identity_camera(f=100.0, w=64, h=48):
    return CameraModel(fx=f, fy=f, cx=w / 2, cy=h / 2, R=np.eye(3), t=np.zeros(3), width=w, height=h)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(fx=-1.0, fy=1.0, cx=0, cy=0, R=np.eye(3), t=np.zeros(3), width=4, height=4)
    with pytest.raises(ValueError):
        CameraModel(fx=1.0, fy=1.0, cx=0, cy=0, R=2 * np.eye(3), t=np.zeros(3), width=4, height=4)


def test_principal_point_ray_is_optical_axis():
    o, d = generate_ray(identity_camera(), (32.0, 24.0))
    np.testing.assert_allclose(d, [0, 0, 1], atol=1e-15)
    np.testing.assert_allclose(o, 0, atol=1e-15)


def test_ray_one_focal_length_off_center_is_45_degrees():
    _, d = generate_ray(identity_camera(f=20.0), (52.0, 24.0))
    assert np.degrees(np.arccos(d[2])) == pytest.approx(45.0, abs=1e-10)


def test_random_directions_unit_and_origin_is_center():
    cam = CameraModel.look_at([0.3, 1.0, 4.0], [0, 0.9, 0], [0, 1, 0], 200, 210, 64, 64)
    rng = np.random.default_rng(0)
    px = rng.uniform(0, 64, size=(1000, 2))
    o, d = generate_rays(cam, px)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1, atol=1e-14)
    np.testing.assert_allclose(o, np.broadcast_to(cam.center, o.shape), atol=1e-14)


def test_rays_reproject_to_their_pixel():
    cam = CameraModel.look_at([0.3, 1.0, 4.0], [0, 0.9, 0], [0, 1, 0], 200, 210, 64, 64)
    px = np.random.default_rng(1).uniform(0, 64, size=(50, 2))
    o, d = generate_rays(cam, px)
    uv, _ = cam.project(o + 2.5 * d)
    np.testing.assert_allclose(uv, px, atol=1e-9)


def test_out_of_bounds_pixel_rejected():
    with pytest.raises(ValueError):
        generate_ray(identity_camera(), (65.0, 3.0))


def test_camera_dict_roundtrip():
    cam = CameraModel.look_at([1, 2, 3], [0, 0, 0], [0, 1, 0], 100, 100, 32, 32)
    back = CameraModel.from_dict(json.loads(json.dumps(cam.to_dict())))
    np.testing.assert_array_equal(back.R, cam.R)
    np.testing.assert_array_equal(back.t, cam.t)


def test_midpoint_stratification_example():
    s = sample_along_ray((np.zeros(3), np.array([0, 0, 1.0])), 1.0, 2.0, count=4)
    np.testing.assert_allclose(s.depths, [1.125, 1.375, 1.625, 1.875])
    np.testing.assert_allclose(s.deltas, [0.25, 0.25, 0.25, 0.125])


def test_bad_bounds_rejected():
    with pytest.raises(ValueError):
        sample_along_ray((np.zeros(3), np.array([0, 0, 1.0])), 2.0, 2.0)


def test_stratified_one_sample_per_bin_for_many_seeds():
    o, d = np.zeros((1000, 3)), np.tile([0.0, 0.0, 1.0], (1000, 1))
    near, far = np.full(1000, 0.5), np.full(1000, 3.5)
    s = sample_along_rays(o, d, near, far, count=96, rng=np.random.default_rng(2))
    assert np.all(s.depths >= 0.5) and np.all(s.depths < 3.5)
    assert np.all(np.diff(s.depths, axis=1) > 0) and np.all(s.deltas > 0)
    bins = np.floor((s.depths - 0.5) / (3.0 / 96)).astype(int)
    np.testing.assert_array_equal(bins, np.broadcast_to(np.arange(96), bins.shape))
    again = sample_along_rays(o, d, near, far, count=96, rng=np.random.default_rng(2))
    np.testing.assert_array_equal(s.depths, again.depths)


def test_empty_space_composite():
    rgb, W = composite(np.zeros(10), np.random.default_rng(3).uniform(size=(10, 3)), np.full(10, 0.1))
    np.testing.assert_array_equal(rgb.data, 0)
    assert W.data == 0
    _, trans = composite_weights(np.zeros(10), np.full(10, 0.1))
    np.testing.assert_array_equal(trans, 1)


def test_opaque_single_sample():
    c = np.array([[0.2, 0.7, 0.4]])
    rgb, W = composite(np.array([200.0]), c, np.array([0.1]))
    np.testing.assert_allclose(rgb.data, c[0], atol=1e-8)
    assert W.data == pytest.approx(1.0, abs=1e-8)


def constant_density_error(sigma, near, far, c, count=96):
    """Midpoint samples with the far cap half a bin past ``far`` tile [near, far] exactly."""
    cap = far + 0.5 * (far - near) / count
    s = sample_along_ray((np.zeros(3), np.array([0, 0, 1.0])), near, far, count, far_cap=cap)
    rgb, _ = composite(np.full(count, sigma), np.tile(c, (count, 1)), s.deltas)
    return np.abs(rgb.data - c * (1 - np.exp(-sigma * (far - near)))).max()


def test_constant_density_matches_analytic():
    assert constant_density_error(1.3, 1.0, 2.5, np.array([0.9, 0.3, 0.6])) <= 1e-3
    rng = np.random.default_rng(4)
    for _ in range(20):
        near = rng.uniform(0.1, 3)
        assert constant_density_error(rng.exponential(3), near, near + rng.uniform(0.1, 4), rng.uniform(size=3)) <= 1e-3


def test_background_fill():
    rgb, W = composite(np.zeros(3), np.zeros((3, 3)), np.ones(3), background=(1.0, 0.5, 0.0))
    np.testing.assert_allclose(rgb.data, [1.0, 0.5, 0.0])


def test_weight_bounds_over_10k_rays():
    rng = np.random.default_rng(5)
    sigma = rng.exponential(5.0, size=(10000, 96)) * (rng.uniform(size=(10000, 96)) < 0.3)
    deltas = rng.uniform(1e-3, 0.1, size=(10000, 96))
    color = rng.uniform(size=(10000, 96, 3))
    rgb, W = composite(sigma, color, deltas)
    assert W.data.min() >= -1e-12 and W.data.max() <= 1 + 1e-12
    assert rgb.data.min() >= 0 and rgb.data.max() <= 1 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 15), st.floats(0.0, 10.0))
def test_weight_monotone_in_sigma(i, bump):
    rng = np.random.default_rng(i)
    sigma, deltas = rng.exponential(1.0, size=16), rng.uniform(0.01, 0.2, size=16)
    w0 = composite_weights(sigma, deltas)[0].sum()
    sigma2 = sigma.copy()
    sigma2[i] += bump
    assert composite_weights(sigma2, deltas)[0].sum() >= w0 - 1e-15


def test_composite_gradients():
    rng = np.random.default_rng(6)
    sigma, color, deltas = rng.exponential(2.0, size=(3, 8)), rng.uniform(size=(3, 8, 3)), rng.uniform(0.05, 0.2, (3, 8))
    w = rng.normal(size=(3, 3))
    tape = dm.Tape()
    s, c = tape.leaf(sigma, "s"), tape.leaf(color, "c")
    rgb, W = composite(s, c, deltas)
    g = tape.backward(dm.sum(rgb * w) + dm.sum(W))
    for key, arr in (("s", sigma), ("c", color)):
        def f(z, key=key):
            a, b = (z, color) if key == "s" else (sigma, z)
            r, ww = composite(a, b, deltas)
            return float((r.data * w).sum() + ww.data.sum())
        num = dm.numerical_grad(f, arr, 1e-6)
        assert np.abs(g[key] - num).max() / np.abs(num).max() < 1e-4


def test_ray_sphere_bounds():
    o = np.array([[0, 0, -5.0], [0, 3.0, -5.0]])
    d = np.array([[0, 0, 1.0], [0, 0, 1.0]])
    near, far, hit = ray_sphere_bounds(o, d, np.zeros(3), 1.0)
    assert hit.tolist() == [True, False]
    assert near[0] == pytest.approx(4.0) and far[0] == pytest.approx(6.0)
    c, r = bounding_sphere(np.array([[-1.0, 0, 0], [1.0, 0, 0]]), inflate=1.2)
    np.testing.assert_allclose(c, 0)
    assert r == pytest.approx(1.2)


def test_save_render_writes_ppm_and_sidecar(tmp_path):
    cam = identity_camera(w=4, h=3)
    img = np.random.default_rng(7).uniform(size=(3, 4, 3))
    save_render(tmp_path / "r.ppm", img, cam, frame=5)
    assert (tmp_path / "r.ppm").read_bytes().startswith(b"P6")
    back = read_ppm(tmp_path / "r.ppm")
    np.testing.assert_allclose(back, np.round(img * 255) / 255, atol=1e-12)
    meta = json.loads((tmp_path / "r.json").read_text())
    assert meta["frame"] == 5 and meta["camera"]["width"] == 4
