"""Training: objective, sample classification, loss-driven subdivision, SGD loop.

The objective is

    L = l_rgb * L_rgb + l_fs * L_fs + l_sdf * L_sdf   (+ optional occluded anchor)

with L_rgb the mean squared rendered-vs-observed gray over rays that render
a surface, and L_fs / L_sdf ray-mean-of-sample-mean squared SDF errors over
free-space and truncation-band samples. SDF supervision lives in scaled
units: one truncation distance maps to 1, so free space is pushed to +1 and
band targets are clamp((D - t)/tr, -1, 1).

Everything in a step is differentiated by hand; gradients reach exactly the
nodes whose voxels contained batch samples, plus the scalar log-sharpness.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import render as rn
from .field import sample_field, scatter_field_gradients
from .grid import DynamicGrid, save_grid, stats, subdivide

FREE_SPACE, TRUNCATION, BEHIND, UNCLASSIFIED = 0, 1, 2, -1


class TrainingDiverged(RuntimeError):
    """Raised when the total loss goes non-finite; diagnostic dump attached."""


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 60000
    rays_per_iter: int = 2048
    coarse_samples: int = 128
    fine_samples: int = 128
    lr: float = 0.1
    lr_decay_factor: float = 0.1
    decay_step: int = 20000
    lambda_rgb: float = 2.0
    lambda_fs: float = 1.0
    lambda_sdf: float = 0.2
    lambda_occluded: float = 0.2
    truncation: float = 0.05
    subdivide_at: tuple[int, ...] = (20000, 40000)
    loss_threshold: float = 1e-4
    subdivide_all_criterion1: bool = False
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    b_init: float = 10.0
    b_lr_scale: float = 0.02  # the global sharpness averages noisy gradients
    jitter: bool = True
    seed: int = 0
    threads: int = 1
    check_split_continuity: bool = True
    continuity_points: int = 1000
    snapshot_every: int = 0
    log_every: int = 500

    def __post_init__(self):
        object.__setattr__(self, "subdivide_at", tuple(int(s) for s in self.subdivide_at))
        if self.iters <= 0 or self.rays_per_iter <= 0:
            raise ValueError("iters and rays_per_iter must be positive")
        if self.coarse_samples < 2:
            raise ValueError("need at least 2 coarse samples per ray")
        if self.truncation <= 0 or self.lr <= 0:
            raise ValueError("truncation and lr must be positive")
        if any(s >= self.iters for s in self.subdivide_at):
            raise ValueError("subdivision steps must be < iters")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


@dataclass
class SceneScale:
    """Record of the SDF-unit scaling: world stays metric, SDF targets are
    divided by the truncation distance so the supervised band is [-1, 1]."""

    truncation: float
    sdf_scale: float
    bbox_min: np.ndarray | None = None
    bbox_max: np.ndarray | None = None


def scale_scene(bbox, truncation: float) -> SceneScale:
    if truncation <= 0:
        raise ValueError("truncation must be positive")
    bmin, bmax = (None, None) if bbox is None else (np.asarray(bbox[0]), np.asarray(bbox[1]))
    return SceneScale(truncation=float(truncation), sdf_scale=1.0 / float(truncation),
                      bbox_min=bmin, bbox_max=bmax)


def sdf_targets(t, depth, truncation: float) -> np.ndarray:
    """Scaled truncated-SDF targets clamp((D - t)/tr, -1, 1) per sample."""
    t = np.asarray(t, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    return np.clip((depth[..., None] - t) / truncation, -1.0, 1.0)


def classify_samples(t, depth, truncation: float) -> np.ndarray:
    """Per-sample class: free space / truncation band / behind.

    t is (n_rays, n_samples), depth (n_rays,) in ray-distance meters.
    Rays with invalid depth (0) get UNCLASSIFIED everywhere.
    """
    t = np.asarray(t, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)[..., None]
    cls = np.full(t.shape, UNCLASSIFIED, dtype=np.int8)
    valid = np.broadcast_to(depth > 0, t.shape)
    cls = np.where(valid & (t < depth - truncation), FREE_SPACE, cls)
    cls = np.where(valid & (np.abs(t - depth) <= truncation), TRUNCATION, cls)
    cls = np.where(valid & (t > depth + truncation), BEHIND, cls)
    return cls


# -- loss terms --------------------------------------------------------------


def loss_rgb(rendered, observed) -> float:
    """Mean squared gray error over the given (already filtered) rays."""
    r = np.asarray(rendered, dtype=np.float64)
    o = np.asarray(observed, dtype=np.float64)
    return float(np.mean((r - o) ** 2)) if r.size else 0.0


def _ray_mean_sq(residual: np.ndarray, mask: np.ndarray):
    """Mean over rays (with >=1 masked sample) of per-ray mean squared residual.

    Returns (loss, d_loss/d_residual-input) with the gradient already scaled
    by both means.
    """
    mask_f = mask.astype(np.float64)
    k = mask_f.sum(axis=1)
    rays = k > 0
    m = int(rays.sum())
    grad = np.zeros_like(residual)
    if m == 0:
        return 0.0, grad
    kk = np.where(rays, k, 1.0)
    inner = (residual**2 * mask_f).sum(axis=1) / kk
    loss = float(inner[rays].sum() / m)
    grad = 2.0 * residual * mask_f / (kk[:, None] * m)
    grad[~rays] = 0.0
    return loss, grad


def loss_fs(sdf, fs_mask) -> float:
    """Free-space term: SDF pushed to +1 (one truncation unit)."""
    loss, _ = _ray_mean_sq(np.asarray(sdf, dtype=np.float64) - 1.0, np.asarray(fs_mask, dtype=bool))
    return loss


def loss_sdf(sdf, targets, trunc_mask) -> float:
    """Truncation-band term: SDF matched to depth-derived targets."""
    resid = np.asarray(sdf, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    loss, _ = _ray_mean_sq(resid, np.asarray(trunc_mask, dtype=bool))
    return loss


def total_loss(rgb: float, fs: float, sdf: float, weights=(2.0, 1.0, 0.2)) -> float:
    l1, l2, l3 = weights
    return l1 * rgb + l2 * fs + l3 * sdf


# -- per-voxel loss bookkeeping ----------------------------------------------


class VoxelLossAccumulator:
    """Per active voxel: image-loss and sdf-loss sums with hit counts."""

    def __init__(self, n_voxels: int):
        self.reset(n_voxels)

    def reset(self, n_voxels: int):
        self.image_sum = np.zeros(n_voxels, dtype=np.float64)
        self.image_count = np.zeros(n_voxels, dtype=np.int64)
        self.sdf_sum = np.zeros(n_voxels, dtype=np.float64)
        self.sdf_count = np.zeros(n_voxels, dtype=np.int64)

    @property
    def size(self) -> int:
        return self.image_sum.shape[0]

    def image_mean(self) -> np.ndarray:
        return np.divide(self.image_sum, self.image_count,
                         out=np.zeros_like(self.image_sum), where=self.image_count > 0)

    def sdf_mean(self) -> np.ndarray:
        return np.divide(self.sdf_sum, self.sdf_count,
                         out=np.zeros_like(self.sdf_sum), where=self.sdf_count > 0)


def accumulate_voxel_losses(acc: VoxelLossAccumulator, sample_rows, image_sq, image_mask,
                            sdf_sq, sdf_mask):
    """Scatter per-sample squared errors into the voxels the samples lie in."""
    rows = np.asarray(sample_rows, dtype=np.int64).ravel()
    n = acc.size
    im = np.asarray(image_mask, bool).ravel()
    sm = np.asarray(sdf_mask, bool).ravel()
    if im.any():
        acc.image_sum += np.bincount(rows[im], weights=np.asarray(image_sq, np.float64).ravel()[im], minlength=n)
        acc.image_count += np.bincount(rows[im], minlength=n)
    if sm.any():
        acc.sdf_sum += np.bincount(rows[sm], weights=np.asarray(sdf_sq, np.float64).ravel()[sm], minlength=n)
        acc.sdf_count += np.bincount(rows[sm], minlength=n)


def select_subdivision_candidates(grid: DynamicGrid, acc: VoxelLossAccumulator,
                                  threshold: float, ignore_threshold: bool = False) -> np.ndarray:
    """Voxel rows to split: surface-straddling corners + loss evidence.

    Criterion 1: over the 8 corner SDFs, min < 1 and max > 0.
    Criterion 2: per-sample mean image loss or sdf loss above `threshold`
    (per-sample means since the last reset; unsampled voxels never qualify).
    `ignore_threshold` keeps criterion 1 but splits every sampled candidate,
    the "whole surface" ablation strategy.
    """
    active = grid.voxel_active & (grid.voxel_level + 1 < grid.config.max_levels)
    rows = np.flatnonzero(active)
    if rows.size == 0:
        return rows
    corner_sdf = grid.node_values[grid.voxel_corners[rows], 0]
    crit1 = (corner_sdf.min(axis=1) < 1.0) & (corner_sdf.max(axis=1) > 0.0)
    sampled = (acc.image_count[rows] > 0) | (acc.sdf_count[rows] > 0)
    if ignore_threshold:
        crit2 = sampled
    else:
        crit2 = ((acc.image_count[rows] > 0) & (acc.image_mean()[rows] > threshold)) | (
            (acc.sdf_count[rows] > 0) & (acc.sdf_mean()[rows] > threshold)
        )
    return rows[crit1 & crit2]


# -- one differentiable batch evaluation --------------------------------------


@dataclass
class BatchResult:
    loss_total: float
    loss_rgb: float
    loss_fs: float
    loss_sdf: float
    loss_occluded: float
    color: np.ndarray  # (n_rays,) rendered gray
    no_surface: np.ndarray  # (n_rays,) bool
    sample_rows: np.ndarray  # (n_rays, S) voxel rows per sample
    image_sq: np.ndarray  # (n_rays,) squared color residual (0 where excluded)
    image_valid: np.ndarray  # (n_rays,) rays included in the color loss
    sdf_sq: np.ndarray  # (n_rays, S) squared sdf residual
    trunc_mask: np.ndarray  # (n_rays, S)
    d_nodes: np.ndarray | None  # (node_count, C)
    d_log_b: float


def evaluate_batch(grid: DynamicGrid, rays: rn.Rays, t: np.ndarray, b: float,
                   cfg: TrainConfig, compute_grads: bool = True,
                   threads: int = 1, field_samples=None) -> BatchResult:
    """Forward losses (and, optionally, exact gradients) for fixed sample depths.

    Pure given (grid values, b): the finite-difference oracle in the tests
    re-invokes it with wiggled node values. `field_samples` may carry
    already-evaluated trace+interp results for exactly these points.
    """
    n_rays, s = t.shape
    if field_samples is not None:
        fs = field_samples
    else:
        x = rays.origins[:, None, :] + t[:, :, None] * rays.dirs[:, None, :]
        np.clip(x, grid.config.bbox_min, grid.config.bbox_max, out=x)
        fs = _sample_field_mt(grid, x.reshape(-1, 3), threads)
    sdf = fs.values[:, 0].reshape(n_rays, s)
    radiance = fs.values[:, 1].reshape(n_rays, s)
    fwd = rn.composite(t, sdf, radiance, b)

    cls = classify_samples(t, rays.depth, cfg.truncation)
    targets = sdf_targets(t, rays.depth, cfg.truncation)
    fs_mask = cls == FREE_SPACE
    trunc_mask = cls == TRUNCATION
    behind_mask = cls == BEHIND

    image_valid = ~fwd.no_surface
    m_rgb = int(image_valid.sum())
    resid_rgb = np.where(image_valid, fwd.color - rays.gray, 0.0)
    l_rgb = float((resid_rgb[image_valid] ** 2).mean()) if m_rgb else 0.0

    l_fs, g_fs = _ray_mean_sq(sdf - 1.0, fs_mask)
    resid_tr = sdf - targets
    l_sdf, g_sdf = _ray_mean_sq(resid_tr, trunc_mask)
    if cfg.lambda_occluded > 0.0:
        l_occ, g_occ = _ray_mean_sq(sdf + 1.0, behind_mask)
    else:
        l_occ, g_occ = 0.0, None

    total = (cfg.lambda_rgb * l_rgb + cfg.lambda_fs * l_fs + cfg.lambda_sdf * l_sdf
             + cfg.lambda_occluded * l_occ)

    d_nodes, d_log_b = None, 0.0
    if compute_grads:
        d_color = np.zeros(n_rays, dtype=np.float64)
        if m_rgb:
            d_color = cfg.lambda_rgb * 2.0 * resid_rgb / m_rgb
        d_sdf_r, d_rad, d_b = rn.render_backward(fwd, d_color)
        d_sdf_r += cfg.lambda_fs * g_fs + cfg.lambda_sdf * g_sdf
        if g_occ is not None:
            d_sdf_r += cfg.lambda_occluded * g_occ
        upstream = np.stack([d_sdf_r.ravel(), d_rad.ravel()], axis=1)
        d_nodes = scatter_field_gradients(fs, upstream, grid.node_count)
        d_log_b = d_b * b  # optimizing log b keeps b positive

    return BatchResult(
        loss_total=total,
        loss_rgb=l_rgb,
        loss_fs=l_fs,
        loss_sdf=l_sdf,
        loss_occluded=l_occ,
        color=fwd.color,
        no_surface=fwd.no_surface,
        sample_rows=fs.rows.reshape(n_rays, s),
        image_sq=resid_rgb**2,
        image_valid=image_valid,
        sdf_sq=resid_tr**2,
        trunc_mask=trunc_mask,
        d_nodes=d_nodes,
        d_log_b=d_log_b,
    )


def _sample_field_mt(grid, x, threads: int):
    """sample_field, optionally chunked over a thread pool (reads only).

    Chunks are concatenated in order, so results are identical for any
    thread count.
    """
    if threads <= 1 or x.shape[0] < 4096:
        return sample_field(grid, x)
    from concurrent.futures import ThreadPoolExecutor

    from .field import FieldSamples

    chunks = np.array_split(np.arange(x.shape[0]), threads)
    with ThreadPoolExecutor(max_workers=threads) as ex:
        parts = list(ex.map(lambda idx: sample_field(grid, x[idx]), chunks))
    return FieldSamples(
        rows=np.concatenate([p.rows for p in parts]),
        levels=np.concatenate([p.levels for p in parts]),
        corner_ids=np.concatenate([p.corner_ids for p in parts]),
        weights=np.concatenate([p.weights for p in parts]),
        values=np.concatenate([p.values for p in parts]),
    )


# -- training loop -------------------------------------------------------------


@dataclass
class SubdivisionEvent:
    iteration: int
    selected: int
    split: int
    rejected: int
    new_nodes: int
    continuity_max_delta: float


@dataclass
class TrainHistory:
    iterations: list = field(default_factory=list)
    loss_total: list = field(default_factory=list)
    loss_rgb: list = field(default_factory=list)
    loss_fs: list = field(default_factory=list)
    loss_sdf: list = field(default_factory=list)
    loss_occluded: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    b: list = field(default_factory=list)
    active_voxels: list = field(default_factory=list)
    node_count: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def write_csv(self, path):
        cols = ["iterations", "loss_total", "loss_rgb", "loss_fs", "loss_sdf",
                "loss_occluded", "lr", "b", "active_voxels", "node_count"]
        with open(path, "w") as f:
            f.write(",".join(cols) + "\n")
            for i in range(len(self.iterations)):
                f.write(",".join(repr(getattr(self, c)[i]) for c in cols) + "\n")


class RaySampler:
    """Uniform (frame, pixel) ray sampling over a whole dataset."""

    def __init__(self, frames, camera: rn.Camera):
        self.camera = camera
        self.n_frames = len(frames)
        self.rot = np.stack([f.pose[:3, :3] for f in frames])
        self.orig = np.stack([f.pose[:3, 3] for f in frames])
        self.gray = np.stack([np.asarray(f.gray, dtype=np.float64).ravel() for f in frames])
        self.depth = np.stack([np.asarray(f.depth, dtype=np.float64).ravel() for f in frames])
        u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
        d = np.stack([(u.ravel() - camera.cx) / camera.fx,
                      (v.ravel() - camera.cy) / camera.fy,
                      np.ones(camera.width * camera.height)], axis=-1)
        self.norm = np.linalg.norm(d, axis=-1)
        self.dir_cam = d / self.norm[:, None]

    def sample(self, rng: np.random.Generator, n: int) -> rn.Rays:
        fids = rng.integers(0, self.n_frames, n)
        pids = rng.integers(0, self.dir_cam.shape[0], n)
        dirs = np.einsum("nij,nj->ni", self.rot[fids], self.dir_cam[pids])
        z = self.depth[fids, pids]
        return rn.Rays(
            origins=self.orig[fids].copy(),
            dirs=dirs,
            gray=self.gray[fids, pids],
            depth=np.where(z > 0, z * self.norm[pids], 0.0),
            pixel_ids=pids,
            frame_ids=fids,
        )


class Trainer:
    def __init__(self, grid: DynamicGrid, frames, camera: rn.Camera,
                 config: TrainConfig, out_dir=None):
        self.grid = grid
        self.cfg = config
        self.out_dir = out_dir
        self.sampler = RaySampler(frames, camera)
        self.scale = scale_scene((grid.config.bbox_min, grid.config.bbox_max), config.truncation)
        self.log_b = math.log(config.b_init)
        self.acc = VoxelLossAccumulator(grid.voxel_count)
        ss = np.random.SeedSequence(config.seed)
        s_main, s_check = ss.spawn(2)
        self.rng = np.random.default_rng(s_main)
        self.rng_check = np.random.default_rng(s_check)
        self.history = TrainHistory()
        self.current_lr = config.lr
        self._adam_m = self._adam_v = None
        self._adam_mb = self._adam_vb = 0.0
        self._adam_t = 0

    @property
    def b(self) -> float:
        return math.exp(self.log_b)

    # -- batching -----------------------------------------------------------

    def _sample_rays(self):
        """A full batch of rays that intersect the bbox (misses resampled)."""
        cfg, g = self.cfg, self.grid.config
        need = cfg.rays_per_iter
        parts, spans = [], []
        for _ in range(1000):
            rays = self.sampler.sample(self.rng, need)
            t0, t1, hit = rn.intersect_bbox(rays.origins, rays.dirs, g.bbox_min, g.bbox_max)
            ok = hit & (t1 - t0 > 1e-9)
            if ok.any():
                parts.append(rays.select(ok))
                spans.append((t0[ok], t1[ok]))
                need -= int(ok.sum())
            if need == 0:
                break
        else:
            raise RuntimeError("could not draw rays intersecting the bounding box")
        if len(parts) == 1:
            rays, (t0, t1) = parts[0], spans[0]
        else:
            rays = rn.Rays(*[np.concatenate([getattr(p, f) for p in parts])
                             for f in ("origins", "dirs", "gray", "depth", "pixel_ids", "frame_ids")])
            t0 = np.concatenate([s[0] for s in spans])
            t1 = np.concatenate([s[1] for s in spans])
        return rays, t0, t1

    def _sample_depths(self, rays, t0, t1):
        """Coarse stratified depths plus one importance round, merged sorted."""
        cfg = self.cfg
        n = len(rays)
        jit = self.rng.random((n, cfg.coarse_samples)) if cfg.jitter else None
        t_coarse = rn.sample_uniform(t0, t1, cfg.coarse_samples, jit)
        if cfg.fine_samples <= 0:
            return t_coarse
        x = rays.origins[:, None, :] + t_coarse[:, :, None] * rays.dirs[:, None, :]
        np.clip(x, self.grid.config.bbox_min, self.grid.config.bbox_max, out=x)
        fs_coarse = _sample_field_mt(self.grid, x.reshape(-1, 3), cfg.threads)
        sdf = fs_coarse.values[:, 0].reshape(n, cfg.coarse_samples)
        fwd = rn.composite(t_coarse, sdf, sdf, self.b)  # weights only; radiance unused
        u = self.rng.random((n, cfg.fine_samples))
        t_fine = rn.sample_importance(t0, t1, fwd.weights, cfg.fine_samples, u)
        return np.sort(np.concatenate([t_coarse, t_fine], axis=1), axis=1)

    # -- optimization ---------------------------------------------------------

    def _apply_gradients(self, d_nodes: np.ndarray, d_log_b: float):
        cfg, lr = self.cfg, self.current_lr
        vals = self.grid.node_values
        lr_b = lr * cfg.b_lr_scale
        if cfg.optimizer == "sgd":
            vals -= lr * d_nodes
            self.log_b -= lr_b * d_log_b
        else:
            if self._adam_m is None or self._adam_m.shape[0] != vals.shape[0]:
                m = np.zeros_like(vals)
                v = np.zeros_like(vals)
                if self._adam_m is not None:
                    m[: self._adam_m.shape[0]] = self._adam_m
                    v[: self._adam_v.shape[0]] = self._adam_v
                self._adam_m, self._adam_v = m, v
            self._adam_t += 1
            b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
            self._adam_m = b1 * self._adam_m + (1 - b1) * d_nodes
            self._adam_v = b2 * self._adam_v + (1 - b2) * d_nodes**2
            mh = self._adam_m / (1 - b1**self._adam_t)
            vh = self._adam_v / (1 - b2**self._adam_t)
            vals -= lr * mh / (np.sqrt(vh) + eps)
            self._adam_mb = b1 * self._adam_mb + (1 - b1) * d_log_b
            self._adam_vb = b2 * self._adam_vb + (1 - b2) * d_log_b**2
            self.log_b -= lr_b * (self._adam_mb / (1 - b1**self._adam_t)) / (
                math.sqrt(self._adam_vb / (1 - b2**self._adam_t)) + eps
            )
        np.clip(vals[:, 0], -1.0, 1.0, out=vals[:, 0])
        if vals.shape[1] > 1:
            np.clip(vals[:, 1:], 0.0, 1.0, out=vals[:, 1:])

    def step(self, iteration: int) -> BatchResult:
        rays, t0, t1 = self._sample_rays()
        t = self._sample_depths(rays, t0, t1)
        res = evaluate_batch(self.grid, rays, t, self.b, self.cfg, threads=self.cfg.threads)
        if not math.isfinite(res.loss_total):
            self._dump_state(iteration)
            raise TrainingDiverged(f"non-finite loss at iteration {iteration}")
        img_mask = np.broadcast_to(res.image_valid[:, None], res.sample_rows.shape)
        img_sq = np.broadcast_to(res.image_sq[:, None], res.sample_rows.shape)
        accumulate_voxel_losses(self.acc, res.sample_rows, img_sq, img_mask,
                                res.sdf_sq, res.trunc_mask)
        self._apply_gradients(res.d_nodes, res.d_log_b)
        return res

    # -- subdivision ----------------------------------------------------------

    def _subdivision_event(self, iteration: int):
        cfg = self.cfg
        rows = select_subdivision_candidates(self.grid, self.acc, cfg.loss_threshold,
                                             ignore_threshold=cfg.subdivide_all_criterion1)
        delta = 0.0
        check_pts = None
        if rows.size and cfg.check_split_continuity and cfg.continuity_points > 0:
            check_pts = self._points_in_voxels(rows, cfg.continuity_points)
            from .field import query

            before = query(self.grid, check_pts)[0]
        report = subdivide(self.grid, rows)
        if check_pts is not None:
            from .field import query

            after = query(self.grid, check_pts)[0]
            delta = float(np.max(np.abs(after - before))) if check_pts.size else 0.0
        self.acc.reset(self.grid.voxel_count)
        ev = SubdivisionEvent(
            iteration=iteration,
            selected=int(rows.size),
            split=int(report.deactivated_rows.size),
            rejected=int(report.rejected_rows.size),
            new_nodes=int(report.new_node_ids.size),
            continuity_max_delta=delta,
        )
        self.history.events.append(ev)
        return ev

    def _points_in_voxels(self, rows, n_points: int) -> np.ndarray:
        pick = rows[self.rng_check.integers(0, rows.size, n_points)]
        lv = self.grid.voxel_level[pick]
        from .grid import decode_key

        coords = np.empty((n_points, 3), dtype=np.int64)
        for l in np.unique(lv):
            sel = lv == l
            ix, iy, iz = decode_key(int(l), self.grid.voxel_key[pick[sel]], self.grid.config.base_res)
            coords[sel] = np.stack([ix, iy, iz], axis=-1)
        cell = self.grid.cell_size(0)[None, :] / (1 << lv)[:, None].astype(np.float64)
        lo = self.grid.config.bbox_min + coords * cell
        return lo + self.rng_check.random((n_points, 3)) * cell

    def _dump_state(self, iteration: int):
        if self.out_dir is None:
            return
        import os

        os.makedirs(self.out_dir, exist_ok=True)
        save_grid(self.grid, os.path.join(self.out_dir, f"diverged_{iteration:06d}.dvgrid"))
        self.history.write_csv(os.path.join(self.out_dir, "history_at_divergence.csv"))

    # -- loop -------------------------------------------------------------------

    def run(self, log_fn=None) -> TrainHistory:
        cfg = self.cfg
        t_start = time.time()
        for it in range(1, cfg.iters + 1):
            res = self.step(it)
            st = stats(self.grid)
            h = self.history
            h.iterations.append(it)
            h.loss_total.append(res.loss_total)
            h.loss_rgb.append(res.loss_rgb)
            h.loss_fs.append(res.loss_fs)
            h.loss_sdf.append(res.loss_sdf)
            h.loss_occluded.append(res.loss_occluded)
            h.lr.append(self.current_lr)
            h.b.append(self.b)
            h.active_voxels.append(sum(st.active_per_level))
            h.node_count.append(st.node_count)
            if log_fn and (it % cfg.log_every == 0 or it == 1 or it == cfg.iters):
                log_fn(
                    f"iter {it:6d}  loss {res.loss_total:.6f}  rgb {res.loss_rgb:.6f}  "
                    f"fs {res.loss_fs:.6f}  sdf {res.loss_sdf:.6f}  occ {res.loss_occluded:.6f}  "
                    f"lr {self.current_lr:.4g}  b {self.b:.3f}  vox {sum(st.active_per_level)}  "
                    f"nodes {st.node_count}  {time.time() - t_start:.1f}s"
                )
            if it in cfg.subdivide_at:
                ev = self._subdivision_event(it)
                if log_fn:
                    log_fn(
                        f"iter {it:6d}  subdivision: split {ev.split} voxels "
                        f"(+{ev.new_nodes} nodes, rejected {ev.rejected}, "
                        f"field delta {ev.continuity_max_delta:.3g})"
                    )
            if it == cfg.decay_step:
                self.current_lr *= cfg.lr_decay_factor
            if cfg.snapshot_every and self.out_dir and it % cfg.snapshot_every == 0:
                import os

                os.makedirs(self.out_dir, exist_ok=True)
                save_grid(self.grid, os.path.join(self.out_dir, f"snapshot_{it:06d}.dvgrid"))
        return self.history


def train(frames, camera: rn.Camera, grid: DynamicGrid, config: TrainConfig,
          out_dir=None, log_fn=None):
    """Run the full schedule; returns (grid, history, final sharpness b)."""
    tr = Trainer(grid, frames, camera, config, out_dir=out_dir)
    history = tr.run(log_fn=log_fn)
    return grid, history, tr.b
