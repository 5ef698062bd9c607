"""Dataset loading, bounding-box estimation, and the synthetic RGB-D oracle.

Dataset directory layout (all little-endian / text):

    intrinsics.txt      fx fy cx cy width height  (one line)
    poses/NNNN.txt      4x4 camera-to-world, row-major text
    color/NNNN.png      8-bit gray or RGB (converted to luminance on load)
    depth/NNNN.png      16-bit, millimeters, 0 = invalid

Depth images store z-depth (distance along the camera +z axis). The camera
frame is +x right, +y down, +z forward; world is z-up for the pose helpers.

The analytic scene (exact SDF spheres/boxes, min-union) is the ground-truth
oracle: `render_synthetic` sphere-traces it to produce posed RGB-D frames
with simple fixed-light Lambertian shading, which is the honest test
condition for a view-invariant radiance model.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
import yaml
from PIL import Image

from .render import Camera

LUMA = (0.299, 0.587, 0.114)  # ITU-R 601


class DatasetError(ValueError):
    """Missing, corrupt or inconsistent dataset files."""


@dataclass
class Frame:
    gray: np.ndarray  # (H, W) float64 in [0, 1]
    depth: np.ndarray  # (H, W) float64 meters (z-depth), 0 invalid
    pose: np.ndarray  # (4, 4) camera-to-world
    frame_id: int = 0

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        r = self.pose[:3, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-3:
            raise DatasetError(f"frame {self.frame_id}: pose rotation is not orthonormal")


# -- dataset I/O --------------------------------------------------------------


def _indexed_files(directory: str, ext: str) -> list[str]:
    if not os.path.isdir(directory):
        raise DatasetError(f"missing directory: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith(ext))
    if not names:
        raise DatasetError(f"no *{ext} files in {directory}")
    return [os.path.join(directory, n) for n in names]


def load_dataset(path: str) -> tuple[list[Frame], Camera]:
    """Load a dataset directory; depth to meters, color to luminance gray."""
    intr = os.path.join(path, "intrinsics.txt")
    if not os.path.isfile(intr):
        raise DatasetError(f"missing intrinsics file: {intr}")
    vals = np.loadtxt(intr).ravel()
    if vals.size != 6:
        raise DatasetError("intrinsics.txt must contain: fx fy cx cy width height")
    camera = Camera(fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3],
                    width=int(vals[4]), height=int(vals[5]))
    poses = _indexed_files(os.path.join(path, "poses"), ".txt")
    colors = _indexed_files(os.path.join(path, "color"), ".png")
    depths = _indexed_files(os.path.join(path, "depth"), ".png")
    if not (len(poses) == len(colors) == len(depths)):
        raise DatasetError(
            f"frame count mismatch: {len(poses)} poses, {len(colors)} color, {len(depths)} depth"
        )
    frames = []
    for i, (pp, cp, dp) in enumerate(zip(poses, colors, depths)):
        pose = np.loadtxt(pp)
        if pose.shape != (4, 4):
            raise DatasetError(f"{pp}: expected a 4x4 pose")
        img = np.asarray(Image.open(cp), dtype=np.float64)
        if img.ndim == 3:
            gray = (img[..., :3] @ np.array(LUMA)) / 255.0
        else:
            gray = img / 255.0
        depth_raw = np.asarray(Image.open(dp))
        if depth_raw.dtype not in (np.uint16, np.int32, np.uint32):
            raise DatasetError(f"{dp}: depth must be a 16-bit png")
        depth = depth_raw.astype(np.float64) / 1000.0
        if gray.shape != (camera.height, camera.width) or depth.shape != gray.shape:
            raise DatasetError(f"frame {i}: image size does not match intrinsics")
        frames.append(Frame(gray=gray, depth=depth, pose=pose, frame_id=i))
    return frames, camera


def save_dataset(frames: list[Frame], camera: Camera, path: str):
    """Write the documented dataset layout (inverse of load_dataset)."""
    os.makedirs(path, exist_ok=True)
    for sub in ("poses", "color", "depth"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    with open(os.path.join(path, "intrinsics.txt"), "w") as f:
        f.write(f"{camera.fx:.17g} {camera.fy:.17g} {camera.cx:.17g} {camera.cy:.17g} "
                f"{camera.width} {camera.height}\n")
    for fr in frames:
        stem = f"{fr.frame_id:04d}"
        np.savetxt(os.path.join(path, "poses", stem + ".txt"), fr.pose, fmt="%.17g")
        g8 = np.clip(np.round(fr.gray * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(g8, mode="L").save(os.path.join(path, "color", stem + ".png"))
        mm = np.clip(np.round(fr.depth * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(os.path.join(path, "depth", stem + ".png"))


def estimate_bbox(frames: list[Frame], camera: Camera, truncation: float = 0.05,
                  stride: int = 4, percentiles: tuple[float, float] = (0.0, 100.0)):
    """Axis-aligned box over back-projected valid depth, plus a 2*tr margin.

    `percentiles` optionally trims extreme depth values before
    back-projection (robustness knob; default keeps everything).
    """
    u, v = np.meshgrid(np.arange(0, camera.width, stride), np.arange(0, camera.height, stride))
    xh = (u.ravel() - camera.cx) / camera.fx
    yh = (v.ravel() - camera.cy) / camera.fy
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    all_depths = [f.depth[::stride, ::stride].ravel() for f in frames]
    valid_all = np.concatenate([d[d > 0] for d in all_depths]) if frames else np.zeros(0)
    if valid_all.size == 0:
        raise DatasetError("no valid depth anywhere; cannot estimate a bounding box")
    dmin, dmax = np.percentile(valid_all, percentiles)
    for f, d in zip(frames, all_depths):
        keep = (d > 0) & (d >= dmin) & (d <= dmax)
        if not keep.any():
            continue
        pts_cam = np.stack([xh[keep] * d[keep], yh[keep] * d[keep], d[keep]], axis=-1)
        pts = pts_cam @ f.pose[:3, :3].T + f.pose[:3, 3]
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    margin = 2.0 * truncation
    return lo - margin, hi + margin


# -- analytic scenes -----------------------------------------------------------


@dataclass
class SpherePrim:
    center: np.ndarray
    radius: float
    albedo: float = 0.8

    def sdf(self, x: np.ndarray) -> np.ndarray:
        return np.linalg.norm(x - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class BoxPrim:
    center: np.ndarray
    half_extents: np.ndarray
    albedo: float = 0.8

    def sdf(self, x: np.ndarray) -> np.ndarray:
        q = np.abs(x - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside


@dataclass
class AnalyticScene:
    primitives: list = field(default_factory=list)
    background: float = 0.1
    ambient: float = 0.3
    light: np.ndarray = field(default_factory=lambda: np.array([0.4, -0.3, 0.85]))

    def __post_init__(self):
        self.light = np.asarray(self.light, dtype=np.float64)
        self.light = self.light / np.linalg.norm(self.light)

    def bounds(self, pad: float = 0.2):
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for p in self.primitives:
            c = np.asarray(p.center, dtype=np.float64)
            r = p.radius if isinstance(p, SpherePrim) else np.asarray(p.half_extents)
            lo = np.minimum(lo, c - r)
            hi = np.maximum(hi, c + r)
        return lo - pad, hi + pad


def analytic_sdf(scene: AnalyticScene, x) -> np.ndarray:
    """Min-union signed distance (exact per primitive, lower bound for unions)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if not scene.primitives:
        raise ValueError("empty scene")
    return np.min(np.stack([p.sdf(x) for p in scene.primitives]), axis=0)


def _analytic_albedo(scene: AnalyticScene, x: np.ndarray) -> np.ndarray:
    d = np.stack([p.sdf(x) for p in scene.primitives])
    alb = np.array([p.albedo for p in scene.primitives])
    return alb[np.argmin(d, axis=0)]


def _analytic_normal(scene: AnalyticScene, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    n = np.empty_like(x)
    for a in range(3):
        step = np.zeros(3)
        step[a] = eps
        n[:, a] = analytic_sdf(scene, x + step) - analytic_sdf(scene, x - step)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-30)


def render_synthetic(scene: AnalyticScene, camera: Camera, poses,
                     tol: float = 1e-5, max_steps: int = 256, t_max: float = 40.0) -> list[Frame]:
    """Sphere-trace the analytic SDF into posed RGB-D frames.

    Depth maps hold z-depth (load_dataset convention); misses get depth 0 and
    the scene's background gray. Shading is Lambertian from the scene's fixed
    light plus an ambient floor.
    """
    u, v = np.meshgrid(np.arange(camera.width), np.arange(camera.height))
    d_cam = np.stack([(u.ravel() - camera.cx) / camera.fx,
                      (v.ravel() - camera.cy) / camera.fy,
                      np.ones(camera.width * camera.height)], axis=-1)
    norm = np.linalg.norm(d_cam, axis=-1)
    d_unit = d_cam / norm[:, None]
    frames = []
    for fid, pose in enumerate(poses):
        pose = np.asarray(pose, dtype=np.float64)
        dirs = d_unit @ pose[:3, :3].T
        origin = pose[:3, 3]
        t = np.zeros(dirs.shape[0])
        hit = np.zeros(dirs.shape[0], dtype=bool)
        alive = np.ones(dirs.shape[0], dtype=bool)
        for _ in range(max_steps):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            p = origin + t[idx, None] * dirs[idx]
            s = analytic_sdf(scene, p)
            close = s < tol
            hit[idx[close]] = True
            alive[idx[close]] = False
            t[idx] += np.maximum(s, 0.0)
            dead = t[idx] > t_max
            alive[idx[dead]] = False
        gray = np.full(dirs.shape[0], scene.background)
        depth = np.zeros(dirs.shape[0])
        if hit.any():
            ph = origin + t[hit, None] * dirs[hit]
            n = _analytic_normal(scene, ph)
            lam = np.maximum(0.0, n @ scene.light)
            gray[hit] = np.clip(_analytic_albedo(scene, ph) * (scene.ambient + (1 - scene.ambient) * lam), 0.0, 1.0)
            # distance along the ray -> z-depth in the camera frame
            depth[hit] = t[hit] / norm[hit]
        frames.append(Frame(
            gray=gray.reshape(camera.height, camera.width),
            depth=depth.reshape(camera.height, camera.width),
            pose=pose,
            frame_id=fid,
        ))
    return frames


# -- pose trajectories ----------------------------------------------------------


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose looking at `target` (+z forward, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(fwd @ up) > 0.999:  # degenerate: looking along up
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose


def make_orbit_poses(n: int, radius: float, target=(0.0, 0.0, 0.0),
                     elev_min_deg: float = -45.0, elev_max_deg: float = 45.0,
                     revolutions: float = 3.0) -> list[np.ndarray]:
    """Spiral orbit: azimuth sweeps `revolutions` turns while the elevation
    climbs linearly, which covers the whole view sphere for solid objects."""
    target = np.asarray(target, dtype=np.float64)
    poses = []
    for k in range(n):
        az = 2.0 * np.pi * revolutions * k / n
        el = np.deg2rad(elev_min_deg + (elev_max_deg - elev_min_deg) * (k / max(n - 1, 1)))
        eye = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(look_at_pose(eye, target))
    return poses


# -- scene files -----------------------------------------------------------------


def load_scene_file(path: str):
    """Parse a YAML scene description -> (AnalyticScene, Camera, trajectory dict).

    Schema (all sections optional except `primitives`):

        primitives:
          - {type: sphere, center: [x,y,z], radius: r, albedo: a}
          - {type: box, center: [x,y,z], half_extents: [hx,hy,hz], albedo: a}
        render:     {background: 0.1, ambient: 0.3, light: [x,y,z]}
        camera:     {width: 160, height: 120, fx: 190, fy: 190, cx: 79.5, cy: 59.5}
        trajectory: {poses: 40, radius: 3.0, elev_min_deg: -45, elev_max_deg: 45,
                     revolutions: 3.0, target: [0,0,0]}
    """
    with open(path) as f:
        doc = yaml.safe_load(f)
    if not isinstance(doc, dict) or "primitives" not in doc:
        raise DatasetError(f"{path}: scene file needs a 'primitives' list")
    prims = []
    for i, p in enumerate(doc["primitives"]):
        kind = p.get("type")
        if kind == "sphere":
            prims.append(SpherePrim(center=np.asarray(p["center"], dtype=np.float64),
                                    radius=float(p["radius"]), albedo=float(p.get("albedo", 0.8))))
        elif kind == "box":
            prims.append(BoxPrim(center=np.asarray(p["center"], dtype=np.float64),
                                 half_extents=np.asarray(p["half_extents"], dtype=np.float64),
                                 albedo=float(p.get("albedo", 0.8))))
        else:
            raise DatasetError(f"{path}: primitive {i} has unknown type {kind!r}")
    rend = doc.get("render", {})
    scene = AnalyticScene(primitives=prims,
                          background=float(rend.get("background", 0.1)),
                          ambient=float(rend.get("ambient", 0.3)),
                          light=np.asarray(rend.get("light", [0.4, -0.3, 0.85]), dtype=np.float64))
    cam = doc.get("camera", {})
    width = int(cam.get("width", 160))
    height = int(cam.get("height", 120))
    camera = Camera(fx=float(cam.get("fx", 0.9 * width)), fy=float(cam.get("fy", 0.9 * width)),
                    cx=float(cam.get("cx", (width - 1) / 2.0)), cy=float(cam.get("cy", (height - 1) / 2.0)),
                    width=width, height=height)
    traj = doc.get("trajectory", {})
    trajectory = dict(
        poses=int(traj.get("poses", 40)),
        radius=float(traj.get("radius", 3.0)),
        elev_min_deg=float(traj.get("elev_min_deg", -45.0)),
        elev_max_deg=float(traj.get("elev_max_deg", 45.0)),
        revolutions=float(traj.get("revolutions", 3.0)),
        target=tuple(float(c) for c in traj.get("target", (0.0, 0.0, 0.0))),
    )
    return scene, camera, trajectory
