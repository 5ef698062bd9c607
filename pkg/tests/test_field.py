import numpy as np
import pytest

from dynagrid.field import (accumulate_gradients, interpolate, interpolate_backward,
                            query, sample_field, scatter_field_gradients)
from dynagrid.grid import GridConfig, OutOfDomainError, init_grid, subdivide, trace


def make_grid(base=(4, 4, 4), levels=3):
    return init_grid(GridConfig(bbox_min=[0, 0, 0], bbox_max=[1, 1, 1],
                                base_res=base, max_levels=levels))


def set_affine(g, fn):
    """Assign node values by evaluating fn at every node position (via corners)."""
    from dynagrid.grid import CORNER_BITS, decode_key

    for row in range(g.voxel_count):
        lv = int(g.voxel_level[row])
        ix, iy, iz = decode_key(lv, int(g.voxel_key[row]), g.config.base_res)
        cell = g.cell_size(lv)
        lo = g.config.bbox_min + np.array([ix, iy, iz]) * cell
        pos = lo + CORNER_BITS * cell
        g.node_values[g.voxel_corners[row], 0] = fn(pos)


def test_interpolate_at_corners():
    g = make_grid()
    rng = np.random.default_rng(0)
    g.node_values[:] = rng.uniform(-1, 1, g.node_values.shape)
    v = trace(g, [0.3, 0.55, 0.8])
    for j in range(8):
        res = interpolate(v.corner_positions[j], v, g.node_values)
        assert np.allclose(res.values, g.node_values[v.corner_ids[j]], atol=1e-12)
        assert res.corner_weights[j] == pytest.approx(1.0)


def test_interpolate_at_center_is_mean():
    g = make_grid()
    rng = np.random.default_rng(1)
    g.node_values[:] = rng.uniform(-1, 1, g.node_values.shape)
    v = trace(g, [0.3, 0.55, 0.8])
    center = v.corner_positions.mean(axis=0)
    res = interpolate(center, v, g.node_values)
    assert np.allclose(res.values, g.node_values[v.corner_ids].mean(axis=0), atol=1e-12)
    assert np.allclose(res.corner_weights, 0.125)


def test_weights_sum_to_one_and_in_range():
    g = make_grid()
    rng = np.random.default_rng(2)
    pts = rng.random((500, 3))
    fs = sample_field(g, pts)
    assert np.all(fs.weights >= 0) and np.all(fs.weights <= 1)
    assert np.allclose(fs.weights.sum(axis=1), 1.0, atol=1e-6)


def test_affine_reproduction_all_levels():
    # trilinear interpolation reproduces affine functions exactly
    fn = lambda p: 2 * p[..., 0] + 3 * p[..., 1] - p[..., 2] + 0.5
    rng = np.random.default_rng(3)
    g = make_grid()
    subdivide(g, [0, 9, 33])
    rows = np.flatnonzero(g.voxel_active & (g.voxel_level == 1))
    subdivide(g, rows[:2])
    set_affine(g, fn)
    pts = rng.random((100, 3))
    got, _ = query(g, pts)
    assert np.max(np.abs(got - fn(pts))) < 1e-6


def test_interpolate_outside_cell_raises():
    g = make_grid()
    v = trace(g, [0.1, 0.1, 0.1])
    with pytest.raises(ValueError):
        interpolate([0.9, 0.9, 0.9], v, g.node_values)


def test_backward_corner_delta():
    g = make_grid()
    v = trace(g, [0.3, 0.55, 0.8])
    for j in (0, 5, 7):
        res = interpolate(v.corner_positions[j], v, g.node_values)
        grads = interpolate_backward(np.array([1.0]), res.corner_weights)
        expect = np.zeros(8)
        expect[j] = 1.0
        assert np.allclose(grads[:, 0], expect, atol=1e-12)


def test_backward_matches_finite_differences():
    g = make_grid()
    rng = np.random.default_rng(4)
    g.node_values[:] = rng.uniform(-1, 1, g.node_values.shape)
    x = rng.random(3)
    v = trace(g, x)
    res = interpolate(x, v, g.node_values)
    up = np.array([0.7, -1.3])
    grads = interpolate_backward(up, res.corner_weights)
    h = 1e-3
    for j in range(8):
        for ch in range(2):
            nid = v.corner_ids[j]
            old = g.node_values[nid, ch]
            g.node_values[nid, ch] = old + h
            plus = interpolate(x, v, g.node_values).values
            g.node_values[nid, ch] = old - h
            minus = interpolate(x, v, g.node_values).values
            g.node_values[nid, ch] = old
            # central difference of <up, value> w.r.t. this corner channel
            fd_ch = (plus - minus)[ch] / (2 * h) * up[ch]
            rel = abs(fd_ch - grads[j, ch]) / max(abs(fd_ch), 1e-9)
            assert rel < 1e-4


def test_backward_gradient_mass_conservation():
    g = make_grid()
    rng = np.random.default_rng(5)
    x = rng.random(3)
    v = trace(g, x)
    res = interpolate(x, v, g.node_values)
    up = np.array([2.5])
    grads = interpolate_backward(up, res.corner_weights)
    assert grads.sum() == pytest.approx(2.5, abs=1e-9)


def test_accumulate_gradients_by_node_id():
    buf = np.zeros((10, 2))
    accumulate_gradients(buf, [1, 1, 3], [[1.0, 0.5], [2.0, 0.5], [1.0, 1.0]])
    assert buf[1, 0] == 3.0 and buf[1, 1] == 1.0
    assert buf[3, 0] == 1.0 and buf[3, 1] == 1.0
    assert buf.sum() == 7.0


def test_query_fresh_grid_center_and_corner():
    g = make_grid(base=(4, 4, 4))
    s, r = query(g, np.array([0.5, 0.5, 0.5]))
    assert s == pytest.approx(1.0)
    s, r = query(g, np.array([0.0, 0.0, 0.0]))
    assert s == pytest.approx(0.0)
    assert r == pytest.approx(0.0)


def test_query_ranges_and_domain():
    g = make_grid()
    rng = np.random.default_rng(6)
    g.node_values[:, 0] = rng.uniform(-1, 1, g.node_count)
    g.node_values[:, 1] = rng.uniform(0, 1, g.node_count)
    pts = rng.random((300, 3))
    s, r = query(g, pts)
    assert np.all(s >= -1) and np.all(s <= 1)
    assert np.all(r >= 0) and np.all(r <= 1)
    with pytest.raises(OutOfDomainError):
        query(g, np.array([1.5, 0.5, 0.5]))


def test_continuity_within_voxel():
    g = make_grid()
    rng = np.random.default_rng(7)
    g.node_values[:] = rng.uniform(-1, 1, g.node_values.shape)
    v = trace(g, [0.3, 0.3, 0.3])
    spread = np.ptp(g.node_values[v.corner_ids, 0])
    min_edge = g.cell_size(0).min()
    lip = 3 * spread / min_edge  # loose bound across the three axes
    lo, hi = v.corner_positions[0], v.corner_positions[7]
    a = lo + rng.random((200, 3)) * (hi - lo)
    d = (rng.random((200, 3)) - 0.5) * 1e-3
    b = np.clip(a + d, lo, hi)
    sa, _ = query(g, a)
    sb, _ = query(g, b)
    assert np.all(np.abs(sa - sb) <= lip * np.linalg.norm(b - a, axis=1) + 1e-12)


def test_scatter_matches_bincount_reference():
    import dynagrid._kernels as _k

    g = make_grid()
    rng = np.random.default_rng(8)
    pts = rng.random((1000, 3))
    fs = sample_field(g, pts)
    up = rng.normal(size=(1000, 2))
    grad = scatter_field_gradients(fs, up, g.node_count)
    # reference: plain bincount accumulation
    ref = np.zeros_like(grad)
    ids = fs.corner_ids.ravel()
    for ch in range(2):
        ref[:, ch] = np.bincount(ids, weights=(fs.weights * up[:, ch:ch + 1]).ravel(),
                                 minlength=g.node_count)
    assert np.allclose(grad, ref, atol=1e-12)
