"""Optional numba-fused hot paths (trace+interpolate, gradient scatter).

The numpy implementations in grid.py / field.py are the reference; these
kernels compute the same quantities in one pass per sample to cut memory
traffic. Both backends are deterministic run-to-run; set
DYNAGRID_DISABLE_NUMBA=1 to force the numpy path (tests compare the two).
"""

from __future__ import annotations

import os

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("DYNAGRID_DISABLE_NUMBA"):
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is an optional accelerator
        pass


if HAVE_NUMBA:

    @njit(cache=True)
    def _trace_interp(x, bbox_min, cell0, res0, base_res, keys_flat, rows_flat, offs,
                      max_levels, corners, values, out_values, out_rows, out_levels,
                      out_cids, out_w):
        n = x.shape[0]
        n_ch = values.shape[1]
        for i in range(n):
            cx = int((x[i, 0] - bbox_min[0]) / cell0[0])
            cy = int((x[i, 1] - bbox_min[1]) / cell0[1])
            cz = int((x[i, 2] - bbox_min[2]) / cell0[2])
            if cx < 0:
                cx = 0
            elif cx > res0[0] - 1:
                cx = res0[0] - 1
            if cy < 0:
                cy = 0
            elif cy > res0[1] - 1:
                cy = res0[1] - 1
            if cz < 0:
                cz = 0
            elif cz > res0[2] - 1:
                cz = res0[2] - 1
            row = (cz * res0[1] + cy) * res0[0] + cx  # level-0 rows are in key order
            lv = 0
            while lv + 1 < max_levels:
                o0, o1 = offs[lv + 1], offs[lv + 2]
                if o1 == o0:
                    break
                scale = np.float64(1 << lv)
                ccx = cx * 2 + (1 if x[i, 0] >= bbox_min[0] + (cx + 0.5) * (cell0[0] / scale) else 0)
                ccy = cy * 2 + (1 if x[i, 1] >= bbox_min[1] + (cy + 0.5) * (cell0[1] / scale) else 0)
                ccz = cz * 2 + (1 if x[i, 2] >= bbox_min[2] + (cz + 0.5) * (cell0[2] / scale) else 0)
                nx = base_res[0] << (lv + 1)
                ny = base_res[1] << (lv + 1)
                ck = (ccz * ny + ccy) * nx + ccx
                lo, hi = o0, o1
                while lo < hi:
                    mid = (lo + hi) >> 1
                    if keys_flat[mid] < ck:
                        lo = mid + 1
                    else:
                        hi = mid
                if lo >= o1 or keys_flat[lo] != ck:
                    break
                row = rows_flat[lo]
                lv += 1
                cx, cy, cz = ccx, ccy, ccz
            scale = np.float64(1 << lv)
            cwx = cell0[0] / scale
            cwy = cell0[1] / scale
            cwz = cell0[2] / scale
            ux = (x[i, 0] - (bbox_min[0] + cx * cwx)) / cwx
            uy = (x[i, 1] - (bbox_min[1] + cy * cwy)) / cwy
            uz = (x[i, 2] - (bbox_min[2] + cz * cwz)) / cwz
            if ux < 0.0:
                ux = 0.0
            elif ux > 1.0:
                ux = 1.0
            if uy < 0.0:
                uy = 0.0
            elif uy > 1.0:
                uy = 1.0
            if uz < 0.0:
                uz = 0.0
            elif uz > 1.0:
                uz = 1.0
            for ch in range(n_ch):
                out_values[i, ch] = 0.0
            for c in range(8):
                w = (ux if c & 1 else 1.0 - ux)
                w = w * (uy if c & 2 else 1.0 - uy)
                w = w * (uz if c & 4 else 1.0 - uz)
                nid = corners[row, c]
                out_w[i, c] = w
                out_cids[i, c] = nid
                for ch in range(n_ch):
                    out_values[i, ch] += w * values[nid, ch]
            out_rows[i] = row
            out_levels[i] = lv

    @njit(cache=True)
    def _scatter(cids, w, up, grad):
        for i in range(cids.shape[0]):
            for c in range(8):
                nid = cids[i, c]
                wc = w[i, c]
                for ch in range(up.shape[1]):
                    grad[nid, ch] += wc * up[i, ch]


class _GridKernelData:
    """Flattened level-index views for the numba kernel; rebuilt on mutation."""

    def __init__(self, grid):
        self.keys_flat = np.concatenate(grid.level_keys) if grid.level_keys else np.zeros(0, np.int64)
        offs = np.zeros(len(grid.level_keys) + 1, dtype=np.int64)
        for i, k in enumerate(grid.level_keys):
            offs[i + 1] = offs[i] + k.size
        self.offs = offs
        self.rows_flat = np.concatenate(grid.level_rows) if grid.level_rows else np.zeros(0, np.int64)
        self.cell0 = grid.cell_size(0)
        self.res0 = grid.res_at(0)
        self.base_res = np.array(grid.config.base_res, dtype=np.int64)
        self.voxel_count = grid.voxel_count


def kernel_data(grid) -> "_GridKernelData":
    kd = getattr(grid, "_kernel_data", None)
    if kd is None or kd.voxel_count != grid.voxel_count:
        kd = _GridKernelData(grid)
        grid._kernel_data = kd
    return kd


def trace_interp(grid, x: np.ndarray):
    """Fused trace+interpolate; returns the same tuple layout as the numpy path
    (values, rows, levels, corner_ids, weights) or None when numba is off."""
    if not HAVE_NUMBA:
        return None
    kd = kernel_data(grid)
    n = x.shape[0]
    c = grid.config.modality_dim
    out_values = np.empty((n, c), dtype=np.float64)
    out_rows = np.empty(n, dtype=np.int64)
    out_levels = np.empty(n, dtype=np.int32)
    out_cids = np.empty((n, 8), dtype=np.int64)
    out_w = np.empty((n, 8), dtype=np.float64)
    _trace_interp(x, grid.config.bbox_min, kd.cell0, kd.res0, kd.base_res,
                  kd.keys_flat, kd.rows_flat, kd.offs, grid.config.max_levels,
                  grid.voxel_corners, grid.node_values, out_values, out_rows,
                  out_levels, out_cids, out_w)
    return out_values, out_rows, out_levels, out_cids, out_w


def scatter(cids, w, up, grad) -> bool:
    if not HAVE_NUMBA:
        return False
    _scatter(cids, w, np.ascontiguousarray(up), grad)
    return True
