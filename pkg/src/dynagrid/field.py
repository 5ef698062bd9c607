"""Trilinear interpolation of node modalities, forward and backward.

The forward pass is pure; the backward pass scatters per-corner gradients
into a dense per-node buffer (cleared by the optimizer each step). Batched
variants carry everything as flat arrays so render/train can stay fully
vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import CORNER_BITS, DynamicGrid, TraceBatch, VoxelRef

_BX = CORNER_BITS[:, 0].astype(np.float64)
_BY = CORNER_BITS[:, 1].astype(np.float64)
_BZ = CORNER_BITS[:, 2].astype(np.float64)


@dataclass
class InterpResult:
    values: np.ndarray  # (C,)
    corner_weights: np.ndarray  # (8,)
    corner_ids: np.ndarray  # (8,)


@dataclass
class FieldSamples:
    """Batched trace+interp context kept for the backward pass."""

    rows: np.ndarray  # (N,) voxel table rows
    levels: np.ndarray  # (N,)
    corner_ids: np.ndarray  # (N, 8)
    weights: np.ndarray  # (N, 8)
    values: np.ndarray  # (N, C)


def trilinear_weights(local: np.ndarray) -> np.ndarray:
    """Corner weights for normalized local coords in [0,1]^3; shape (..., 8)."""
    u = np.asarray(local, dtype=np.float64)
    wx = (1.0 - u[..., 0, None]) * (1.0 - _BX) + u[..., 0, None] * _BX
    wy = (1.0 - u[..., 1, None]) * (1.0 - _BY) + u[..., 1, None] * _BY
    wz = (1.0 - u[..., 2, None]) * (1.0 - _BZ) + u[..., 2, None] * _BZ
    return wx * wy * wz


def interpolate(x, voxel: VoxelRef, node_values: np.ndarray) -> InterpResult:
    """Interpolate node modalities at ``x`` inside one voxel cell."""
    x = np.asarray(x, dtype=np.float64)
    lo = voxel.corner_positions[0]
    hi = voxel.corner_positions[7]
    if np.any(x < lo - 1e-12) or np.any(x > hi + 1e-12):
        raise ValueError("point outside the voxel cell")
    local = (x - lo) / (hi - lo)
    w = trilinear_weights(local)
    vals = w @ node_values[voxel.corner_ids]
    return InterpResult(values=vals, corner_weights=w, corner_ids=voxel.corner_ids)


def interpolate_backward(upstream, weights) -> np.ndarray:
    """Per-corner gradients: corner i receives w_i * upstream; shape (8, C)."""
    upstream = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    return np.asarray(weights, dtype=np.float64)[:, None] * upstream[None, :]


def accumulate_gradients(buffer: np.ndarray, corner_ids, grads):
    """Sum per-corner gradient vectors into `buffer` keyed by node id."""
    ids = np.asarray(corner_ids, dtype=np.int64).ravel()
    g = np.asarray(grads, dtype=np.float64).reshape(ids.size, -1)
    for ch in range(buffer.shape[1]):
        buffer[:, ch] += np.bincount(ids, weights=g[:, ch], minlength=buffer.shape[0])


def sample_field(grid: DynamicGrid, x: np.ndarray, traced: TraceBatch | None = None) -> FieldSamples:
    """Trace a point batch and interpolate all modalities at once."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    cfg = grid.config
    if np.any(x < cfg.bbox_min) or np.any(x > cfg.bbox_max):
        from .grid import OutOfDomainError

        raise OutOfDomainError("point(s) outside the grid bounding box")
    if traced is None:
        fused = _kernels.trace_interp(grid, x)
        if fused is not None:
            vals, rows, levels, cids, w = fused
            return FieldSamples(rows=rows, levels=levels, corner_ids=cids, weights=w, values=vals)
    tb = traced if traced is not None else grid.trace_batch(x)
    cs0 = grid.cell_size(0)
    cell = cs0[None, :] / (1 << tb.levels)[:, None].astype(np.float64)
    lo = grid.config.bbox_min + tb.coords * cell
    local = np.clip((x - lo) / cell, 0.0, 1.0)
    w = trilinear_weights(local)
    cids = grid.voxel_corners[tb.rows]
    vals = np.einsum("nc,ncm->nm", w, grid.node_values[cids])
    return FieldSamples(rows=tb.rows, levels=tb.levels, corner_ids=cids, weights=w, values=vals)


def scatter_field_gradients(samples: FieldSamples, upstream: np.ndarray, node_count: int) -> np.ndarray:
    """Dense (node_count, C) gradient from per-sample upstream (N, C)."""
    up = np.asarray(upstream, dtype=np.float64)
    grad = np.zeros((node_count, up.shape[1]), dtype=np.float64)
    if _kernels.scatter(samples.corner_ids, samples.weights, up, grad):
        return grad
    ids = samples.corner_ids.ravel()
    for ch in range(up.shape[1]):
        contrib = (samples.weights * up[:, ch : ch + 1]).ravel()
        grad[:, ch] = np.bincount(ids, weights=contrib, minlength=node_count)
    return grad


def query(grid: DynamicGrid, x) -> tuple[np.ndarray, np.ndarray]:
    """(sdf, radiance) at world points ``x`` ((N,3) or (3,)), trace + interp."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    fs = sample_field(grid, x[None, :] if single else x)
    sdf = fs.values[:, 0]
    rad = fs.values[:, 1] if fs.values.shape[1] > 1 else np.zeros_like(sdf)
    if single:
        return float(sdf[0]), float(rad[0])
    return sdf, rad
