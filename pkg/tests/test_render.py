import numpy as np
import pytest
from scipy.stats import chisquare

from dynagrid.render import (Camera, Rays, alpha, composite, generate_rays, intersect_bbox,
                             render_backward, sample_importance, sample_uniform)


def make_camera():
    return Camera(fx=100.0, fy=100.0, cx=40.0, cy=30.0, width=80, height=60)


def identity_rays(pixel_ids, gray=None, depth=None):
    cam = make_camera()
    h, w = cam.height, cam.width
    gray = np.zeros((h, w)) if gray is None else gray
    depth = np.zeros((h, w)) if depth is None else depth
    return cam, generate_rays(cam, np.eye(4), pixel_ids, gray, depth)


# -- ray generation -------------------------------------------------------------


def test_center_pixel_points_forward():
    cam, rays = identity_rays([30 * 80 + 40])  # pixel (cx, cy)
    assert np.allclose(rays.dirs[0], [0, 0, 1], atol=1e-12)


def test_directions_unit_norm():
    rng = np.random.default_rng(0)
    cam, rays = identity_rays(rng.integers(0, 80 * 60, 200))
    assert np.allclose(np.linalg.norm(rays.dirs, axis=1), 1.0, atol=1e-6)


def test_pinhole_slope():
    cam = make_camera()
    # pixel (cx + fx, cy) is off-image for this camera; use fx scaled into range
    cam2 = Camera(fx=30.0, fy=30.0, cx=40.0, cy=30.0, width=80, height=60)
    pid = 30 * 80 + (40 + 30)
    rays = generate_rays(cam2, np.eye(4), [pid], np.zeros((60, 80)), np.zeros((60, 80)))
    d = rays.dirs[0]
    assert d[0] / d[2] == pytest.approx(1.0, abs=1e-12)


def test_depth_converted_to_ray_distance():
    cam = make_camera()
    depth = np.full((60, 80), 2.0)
    pid = 10 * 80 + 70  # off-axis pixel
    rays = generate_rays(cam, np.eye(4), [pid], np.zeros((60, 80)), depth)
    xh = (70 - cam.cx) / cam.fx
    yh = (10 - cam.cy) / cam.fy
    assert rays.depth[0] == pytest.approx(2.0 * np.sqrt(xh**2 + yh**2 + 1))
    # invalid depth stays 0
    depth[10, 70] = 0.0
    rays = generate_rays(cam, np.eye(4), [pid], np.zeros((60, 80)), depth)
    assert rays.depth[0] == 0.0


def test_pose_rotates_rays():
    cam = make_camera()
    pose = np.eye(4)
    pose[:3, :3] = np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]])  # +z -> +x
    pose[:3, 3] = [1, 2, 3]
    rays = generate_rays(cam, pose, [30 * 80 + 40], np.zeros((60, 80)), np.zeros((60, 80)))
    assert np.allclose(rays.dirs[0], [1, 0, 0], atol=1e-12)
    assert np.allclose(rays.origins[0], [1, 2, 3])


# -- bbox intersection ------------------------------------------------------------


def test_intersect_from_inside():
    t0, t1, hit = intersect_bbox([0.5, 0.5, 0.5], [1, 0, 0],
                                 np.zeros(3), np.ones(3))
    assert hit[0] and t0[0] == 0.0 and t1[0] == pytest.approx(0.5)


def test_intersect_parallel_miss():
    t0, t1, hit = intersect_bbox([-1.0, 2.0, 0.5], [1, 0, 0], np.zeros(3), np.ones(3))
    assert not hit[0]


def test_intersect_endpoints_on_surface():
    rng = np.random.default_rng(1)
    o = rng.normal(size=(1000, 3)) * 3
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    lo, hi = np.zeros(3), np.ones(3)
    t0, t1, hit = intersect_bbox(o, d, lo, hi)
    for i in np.flatnonzero(hit)[:200]:
        for t in (t0[i], t1[i]):
            p = o[i] + t * d[i]
            if t > 0:
                on_face = np.min(np.abs(np.concatenate([p - lo, p - hi])))
                inside = np.all(p > lo - 1e-6) and np.all(p < hi + 1e-6)
                assert on_face < 1e-6 or (t == t0[i] and inside)
            assert np.all(p >= lo - 1e-6) and np.all(p <= hi + 1e-6)


def test_intersect_behind_origin_clipped():
    t0, t1, hit = intersect_bbox([2.0, 0.5, 0.5], [1, 0, 0], np.zeros(3), np.ones(3))
    assert not hit[0]


# -- stratified sampling ------------------------------------------------------------


def test_sample_uniform_midpoints():
    t = sample_uniform([0.0], [1.0], 4, jitter=None)
    assert np.allclose(t[0], [0.125, 0.375, 0.625, 0.875])


def test_sample_uniform_jitter_stays_in_stratum():
    rng = np.random.default_rng(2)
    jit = rng.random((5, 16))
    t = sample_uniform(np.zeros(5), np.ones(5), 16, jit)
    edges = np.arange(17) / 16
    for i in range(5):
        assert np.all(t[i] >= edges[:-1]) and np.all(t[i] < edges[1:])
        assert np.all(np.diff(t[i]) > 0)


def test_sample_importance_concentrates():
    rng = np.random.default_rng(3)
    w = np.zeros((1, 8))
    w[0, 3] = 1.0
    t = sample_importance([0.0], [1.0], w, 32, rng.random((1, 32)))
    assert np.all(t >= 3 / 8) and np.all(t <= 4 / 8)


def test_sample_importance_zero_weights_uniform_fallback():
    rng = np.random.default_rng(4)
    w = np.zeros((1, 8))
    t = sample_importance([0.0], [1.0], w, 64, rng.random((1, 64)))
    assert t.shape == (1, 64)
    assert np.all(t >= 0) and np.all(t <= 1)
    assert t.std() > 0.2  # spread over the whole interval


def test_sample_importance_uniform_weights_chi_square():
    rng = np.random.default_rng(5)
    w = np.ones((1, 10))
    t = sample_importance(np.zeros(1), np.ones(1), w, 5000, rng.random((1, 5000)))
    counts, _ = np.histogram(t[0], bins=10, range=(0, 1))
    _, p = chisquare(counts)
    assert p > 0.01


# -- opacity ---------------------------------------------------------------------


def test_alpha_equal_sdf_zero():
    assert alpha(0.5, 0.5, 4.0) == 0.0


def test_alpha_increasing_sdf_clamped():
    assert alpha(0.2, 0.8, 4.0) == 0.0


def test_alpha_hand_value():
    # sigma(1)=0.731059, sigma(-1)=0.268941 -> (0.731059-0.268941)/0.731059
    assert alpha(1.0, -1.0, 1.0) == pytest.approx(0.632121, abs=1e-6)


def test_alpha_monotone_in_b_on_crossing():
    vals = [alpha(0.5, -0.5, b) for b in (1.0, 2.0, 5.0, 10.0, 30.0)]
    assert all(v2 > v1 for v1, v2 in zip(vals, vals[1:]))


def test_alpha_rejects_nonpositive_b():
    with pytest.raises(ValueError):
        alpha(0.5, -0.5, 0.0)


# -- compositing ------------------------------------------------------------------


def test_composite_single_opaque_sample():
    t = np.array([[0.2, 0.4]])
    sdf = np.array([[0.9, -0.9]])
    rad = np.array([[0.7, 0.7]])
    fwd = composite(t, sdf, rad, 8.0)
    assert not fwd.no_surface[0]
    assert fwd.color[0] == pytest.approx(0.7)


def test_composite_constant_radiance():
    rng = np.random.default_rng(6)
    t = np.sort(rng.random((3, 16)), axis=1)
    sdf = np.linspace(1, -1, 16)[None, :].repeat(3, axis=0)
    rad = np.full((3, 16), 0.42)
    fwd = composite(t, sdf, rad, 10.0)
    assert np.all(~fwd.no_surface)
    assert np.allclose(fwd.color, 0.42)


def test_composite_no_surface_flag():
    t = np.array([[0.1, 0.2, 0.3]])
    sdf = np.array([[0.1, 0.5, 0.9]])  # increasing -> all alpha 0
    fwd = composite(t, sdf, np.ones_like(sdf), 10.0)
    assert fwd.no_surface[0]
    assert fwd.color[0] == 0.0


def test_transmittance_telescoping_identity():
    rng = np.random.default_rng(7)
    t = np.sort(rng.random((5, 20)), axis=1)
    sdf = rng.uniform(-1, 1, (5, 20))
    fwd = composite(t, sdf, rng.random((5, 20)), 6.0)
    for k in range(20):
        lhs = 1.0 - fwd.weights[:, : k + 1].sum(axis=1)
        rhs = np.prod(1.0 - fwd.alpha[:, : k + 1], axis=1)
        assert np.max(np.abs(lhs - rhs)) < 1e-6


def test_weights_nonneg_t_monotone():
    rng = np.random.default_rng(8)
    t = np.sort(rng.random((4, 12)), axis=1)
    sdf = rng.uniform(-1, 1, (4, 12))
    fwd = composite(t, sdf, rng.random((4, 12)), 5.0)
    assert np.all(fwd.weights >= 0)
    assert np.all(fwd.transmittance[:, 0] == 1.0)
    assert np.all(np.diff(fwd.transmittance, axis=1) <= 1e-15)
    assert np.all(fwd.alpha >= 0) and np.all(fwd.alpha <= 1)


def test_weight_concentration_at_zero_crossing():
    # clean linear SDF crossing: argmax weight brackets the zero
    t = np.linspace(0.0, 1.0, 32)[None, :]
    sdf = np.linspace(1.0, -1.0, 32)[None, :]
    fwd = composite(t, sdf, np.ones_like(sdf), 20.0)
    k = int(np.argmax(fwd.weights[0]))
    assert sdf[0, k] >= 0 >= sdf[0, k + 1]


def test_rendered_depth_tracks_crossing():
    t = np.linspace(0.0, 2.0, 64)[None, :]
    sdf = 1.0 - t  # zero at t = 1
    fwd = composite(t, sdf, np.ones_like(sdf), 30.0)
    assert fwd.depth[0] == pytest.approx(1.0, abs=0.05)


# -- backward ---------------------------------------------------------------------


def _color_loss_grads(t, sdf, rad, b, target):
    fwd = composite(t, sdf, rad, b)
    valid = ~fwd.no_surface
    m = max(int(valid.sum()), 1)
    dLdR = np.where(valid, 2 * (fwd.color - target) / m, 0.0)
    return fwd, render_backward(fwd, dLdR)


def test_backward_matches_fd_per_sample():
    rng = np.random.default_rng(9)
    n, s = 1, 5
    t = np.sort(rng.random((n, s)) + 0.1, axis=1)
    sdf = rng.uniform(-1, 1, (n, s))
    rad = rng.uniform(0, 1, (n, s))
    b = 6.0
    target = np.array([0.3])

    def loss(sdf_, b_):
        fwd = composite(t, sdf_, rad, b_)
        valid = ~fwd.no_surface
        return float(((fwd.color - target)[valid] ** 2).mean()) if valid.any() else 0.0

    fwd, (d_sdf, d_rad, d_b) = _color_loss_grads(t, sdf, rad, b, target)
    h = 1e-4
    for k in range(s):
        sp, sm = sdf.copy(), sdf.copy()
        sp[0, k] += h
        sm[0, k] -= h
        fd = (loss(sp, b) - loss(sm, b)) / (2 * h)
        if abs(fd) > 1e-12 or abs(d_sdf[0, k]) > 1e-12:
            assert abs(fd - d_sdf[0, k]) / max(abs(fd), abs(d_sdf[0, k])) < 1e-3
    fd_b = (loss(sdf, b + h) - loss(sdf, b - h)) / (2 * h)
    assert abs(fd_b - d_b) / max(abs(fd_b), 1e-12) < 1e-3


def test_backward_all_alpha_zero_gives_zero_grads():
    t = np.array([[0.1, 0.2, 0.3]])
    sdf = np.array([[0.1, 0.5, 0.9]])
    rad = np.array([[0.2, 0.4, 0.9]])
    fwd, (d_sdf, d_rad, d_b) = _color_loss_grads(t, sdf, rad, 10.0, np.array([0.5]))
    assert np.all(d_sdf == 0) and np.all(d_rad == 0) and d_b == 0


def test_backward_radiance_matches_fd():
    rng = np.random.default_rng(10)
    t = np.sort(rng.random((2, 6)), axis=1)
    sdf = rng.uniform(-1, 1, (2, 6))
    rad = rng.uniform(0, 1, (2, 6))
    target = rng.random(2)
    b = 4.0

    def loss(rad_):
        fwd = composite(t, sdf, rad_, b)
        valid = ~fwd.no_surface
        return float(((fwd.color - target)[valid] ** 2).mean())

    fwd, (_, d_rad, _) = _color_loss_grads(t, sdf, rad, b, target)
    h = 1e-5
    for i in range(2):
        for k in range(6):
            rp, rm = rad.copy(), rad.copy()
            rp[i, k] += h
            rm[i, k] -= h
            fd = (loss(rp) - loss(rm)) / (2 * h)
            if abs(fd) > 1e-12 or abs(d_rad[i, k]) > 1e-12:
                assert abs(fd - d_rad[i, k]) / max(abs(fd), abs(d_rad[i, k])) < 1e-3
