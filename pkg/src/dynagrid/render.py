"""Ray generation, sampling and SDF volume rendering (forward + backward).

Rays are batched as struct-of-arrays; per-ray sample axes are fixed-width
(n_rays, n_samples) so the whole renderer stays vectorized. Opacity follows
the sigmoid-ratio form

    alpha_i = max((sig_b(s_i) - sig_b(s_{i+1})) / sig_b(s_i), 0)

computed in log space as alpha = 1 - exp(min(dlt, 0)) with
dlt = log sig_b(s_{i+1}) - log sig_b(s_i), which is overflow-free for any b
and makes the clamp mask explicit (dlt < 0). The backward pass is exact
reverse-mode differentiation through compositing, the clamp (subgradient 0)
and the sigmoid chain, including the learnable sharpness b.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

WEIGHT_EPS = 1e-8  # below this, a ray renders no surface and leaves the color loss


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics. Axes: +x right, +y down, +z forward (right-handed).

    Integer pixel coordinates address pixel centers, so the camera-space ray
    of pixel (u, v) is ((u - cx)/fx, (v - cy)/fy, 1) before normalization.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class Rays:
    """A batch of posed rays with their observed pixel values.

    depth is the observed surface distance *along the ray* in meters
    (z-depth maps are converted at generation time); 0 marks invalid depth.
    """

    origins: np.ndarray  # (N, 3)
    dirs: np.ndarray  # (N, 3) unit
    gray: np.ndarray  # (N,) observed grayscale in [0, 1]
    depth: np.ndarray  # (N,) ray-distance, 0 = invalid
    pixel_ids: np.ndarray  # (N,)
    frame_ids: np.ndarray  # (N,)

    def __len__(self):
        return self.origins.shape[0]

    def select(self, idx) -> "Rays":
        return Rays(
            self.origins[idx],
            self.dirs[idx],
            self.gray[idx],
            self.depth[idx],
            self.pixel_ids[idx],
            self.frame_ids[idx],
        )


def generate_rays(camera: Camera, pose: np.ndarray, pixel_ids, gray_image, depth_image, frame_id=0) -> Rays:
    """Back-project pixels through a camera-to-world pose into world rays."""
    pose = np.asarray(pose, dtype=np.float64)
    pixel_ids = np.asarray(pixel_ids, dtype=np.int64)
    px = (pixel_ids % camera.width).astype(np.float64)
    py = (pixel_ids // camera.width).astype(np.float64)
    d_cam = np.stack(
        [(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, np.ones_like(px)],
        axis=-1,
    )
    norm = np.linalg.norm(d_cam, axis=-1)
    dirs = (d_cam / norm[:, None]) @ pose[:3, :3].T
    origins = np.broadcast_to(pose[:3, 3], dirs.shape).copy()
    gray = np.asarray(gray_image, dtype=np.float64).reshape(-1)[pixel_ids]
    z = np.asarray(depth_image, dtype=np.float64).reshape(-1)[pixel_ids]
    depth = np.where(z > 0, z * norm, 0.0)  # z-depth -> distance along the unit ray
    return Rays(
        origins=origins,
        dirs=dirs,
        gray=gray,
        depth=depth,
        pixel_ids=pixel_ids,
        frame_ids=np.full(pixel_ids.shape, frame_id, dtype=np.int64),
    )


def intersect_bbox(origins, dirs, bbox_min, bbox_max):
    """Slab intersection clipped to t >= 0: (t_near, t_far, hit)."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (bbox_min - origins) * inv
        t2 = (bbox_max - origins) * inv
    # rays parallel to an axis: inside the slab -> (-inf, inf), outside -> empty
    par = dirs == 0.0
    inside = (origins >= bbox_min) & (origins <= bbox_max)
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    t_near = np.maximum(lo.max(axis=-1), 0.0)
    t_far = hi.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def sample_uniform(t_near, t_far, n: int, jitter: np.ndarray | None = None) -> np.ndarray:
    """Stratified depths, one uniform jitter per stratum; (n_rays, n), sorted.

    jitter is an optional (n_rays, n) array of uniforms in [0, 1);
    None places samples at stratum midpoints.
    """
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    u = np.full((t_near.size, n), 0.5) if jitter is None else np.asarray(jitter, dtype=np.float64)
    span = (t_far - t_near)[:, None]
    return t_near[:, None] + (np.arange(n)[None, :] + u) * span / n


def sample_importance(t_near, t_far, coarse_weights, n: int, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF depths over the piecewise-constant coarse-stratum weights.

    Rays whose weights sum to zero fall back to uniform over the interval.
    u is (n_rays, n) uniforms in [0, 1). Output is unsorted.
    """
    w = np.asarray(coarse_weights, dtype=np.float64)
    n_rays, nc = w.shape
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    wsum = w.sum(axis=1, keepdims=True)
    w_use = np.where(wsum > 0, w, 1.0)
    cdf = np.cumsum(w_use, axis=1)
    cdf = cdf / cdf[:, -1:]
    # row-offset trick: one flat searchsorted instead of a per-row loop
    row = np.arange(n_rays, dtype=np.float64)[:, None]
    flat_cdf = (cdf + 2.0 * row).ravel()
    flat_u = (np.clip(u, 0.0, 1.0 - 1e-12) + 2.0 * row).ravel()
    idx = np.searchsorted(flat_cdf, flat_u, side="right")
    j = (idx - np.repeat(np.arange(n_rays), n) * nc).reshape(n_rays, n)
    j = np.clip(j, 0, nc - 1)
    left = np.where(j > 0, np.take_along_axis(cdf, np.maximum(j - 1, 0), axis=1), 0.0)
    right = np.take_along_axis(cdf, j, axis=1)
    den = right - left
    frac = np.where(den > 0, (u - left) / np.where(den > 0, den, 1.0), 0.5)
    span = (t_far - t_near)[:, None]
    return t_near[:, None] + (j + np.clip(frac, 0.0, 1.0)) * span / nc


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def alpha(sdf_i, sdf_next, b: float):
    """Opacity of one interval from its endpoint SDF values (Eq.-style scalar op)."""
    if b <= 0:
        raise ValueError("sharpness b must be positive")
    dlt = _log_sigmoid(b * np.asarray(sdf_next, dtype=np.float64)) - _log_sigmoid(
        b * np.asarray(sdf_i, dtype=np.float64)
    )
    return 1.0 - np.exp(np.minimum(dlt, 0.0))


@dataclass
class RenderForward:
    """Everything the backward pass needs, retained from one forward call."""

    t: np.ndarray  # (N, S) sample depths
    sdf: np.ndarray  # (N, S)
    radiance: np.ndarray  # (N, S)
    b: float
    dlt: np.ndarray  # (N, S-1) log-sigmoid differences (pre-clamp)
    rho: np.ndarray  # (N, S-1) exp(min(dlt, 0)) = 1 - alpha
    alpha: np.ndarray  # (N, S) per-sample opacity (last column 0)
    transmittance: np.ndarray  # (N, S), T_0 = 1
    weights: np.ndarray  # (N, S) visibility weights T*alpha
    weight_sum: np.ndarray  # (N,)
    color: np.ndarray  # (N,) rendered gray (0 where no surface)
    depth: np.ndarray  # (N,) rendered depth, diagnostic only
    no_surface: np.ndarray  # (N,) bool, weight_sum < WEIGHT_EPS


def composite(t, sdf, radiance, b: float) -> RenderForward:
    """Transmittance-weighted normalized compositing along each ray."""
    t = np.asarray(t, dtype=np.float64)
    sdf = np.asarray(sdf, dtype=np.float64)
    radiance = np.asarray(radiance, dtype=np.float64)
    n, s = sdf.shape
    ls = _log_sigmoid(b * sdf)
    dlt = ls[:, 1:] - ls[:, :-1]
    rho = np.exp(np.minimum(dlt, 0.0))
    a = np.empty((n, s), dtype=np.float64)
    a[:, :-1] = 1.0 - rho
    a[:, -1] = 0.0
    transmittance = np.empty((n, s), dtype=np.float64)
    transmittance[:, 0] = 1.0
    if s > 1:
        np.cumprod(rho, axis=1, out=transmittance[:, 1:])
    w = transmittance * a
    wsum = w.sum(axis=1)
    no_surface = wsum < WEIGHT_EPS
    safe = np.where(no_surface, 1.0, wsum)
    color = np.where(no_surface, 0.0, (w * radiance).sum(axis=1) / safe)
    depth = np.where(no_surface, 0.0, (w * t).sum(axis=1) / safe)
    return RenderForward(
        t=t,
        sdf=sdf,
        radiance=radiance,
        b=b,
        dlt=dlt,
        rho=rho,
        alpha=a,
        transmittance=transmittance,
        weights=w,
        weight_sum=wsum,
        color=color,
        depth=depth,
        no_surface=no_surface,
    )


def render_backward(fwd: RenderForward, dL_dcolor: np.ndarray):
    """Gradients of the color loss w.r.t. sampled sdf, radiance and b.

    dL_dcolor must already be 0 for rays excluded from the loss (no-surface
    rays). Returns (dL_dsdf (N,S), dL_dradiance (N,S), dL_db scalar).
    """
    n, s = fwd.sdf.shape
    upstream = np.where(fwd.no_surface, 0.0, np.asarray(dL_dcolor, dtype=np.float64))
    safe = np.where(fwd.no_surface, 1.0, fwd.weight_sum)
    d_rad = upstream[:, None] * fwd.weights / safe[:, None]
    # through the normalized sum: dR/dw_i = (r_i - R) / sum(w)
    d_w = upstream[:, None] * (fwd.radiance - fwd.color[:, None]) / safe[:, None]
    # reverse scan: dL/dalpha_j = T_j (dL/dw_j - S_j), S from later samples
    d_alpha = np.zeros((n, s), dtype=np.float64)
    acc = np.zeros(n, dtype=np.float64)
    for j in range(s - 2, -1, -1):
        acc = d_w[:, j + 1] * fwd.alpha[:, j + 1] + (1.0 - fwd.alpha[:, j + 1]) * acc
        d_alpha[:, j] = fwd.transmittance[:, j] * (d_w[:, j] - acc)
    # clamp subgradient: alpha only responds where dlt < 0
    live = fwd.dlt < 0.0
    m = d_alpha[:, :-1] * live * fwd.rho
    e = expit(-fwd.b * fwd.sdf)
    d_sdf = np.zeros((n, s), dtype=np.float64)
    d_sdf[:, :-1] += m * fwd.b * e[:, :-1]
    d_sdf[:, 1:] -= m * fwd.b * e[:, 1:]
    d_b = float(np.sum(-m * (fwd.sdf[:, 1:] * e[:, 1:] - fwd.sdf[:, :-1] * e[:, :-1])))
    return d_sdf, d_rad, d_b
