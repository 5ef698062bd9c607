"""Dynamic sparse voxel grid.

Storage follows a flat, vectorization-friendly layout:

* node values live in one ``(node_count, C)`` matrix (SDF in column 0,
  grayscale radiance in column 1); rows are append-only and node ids are
  stable for the lifetime of the grid,
* every voxel is a row of a flat table holding its 8 corner node ids, its
  level and an active flag; subdividing a voxel appends 8 child rows and
  deactivates the parent (rows are never removed),
* per level, an ordered key -> row index maps voxel keys to table rows.
  A key is present at level l+1 iff its parent voxel was subdivided, which
  is the terminal test used while tracing.

Conventions (shared by every module):
* voxel keys: key = (iz * ny + iy) * nx + ix with nx = 2^l * Nx,
  ny = 2^l * Ny (x fastest),
* corner order within a voxel: corner c has offset bits
  (x=c&1, y=(c>>1)&1, z=(c>>2)&1), i.e. x fastest,
* a point on a face shared by two cells belongs to the cell with the
  larger index; on the bounding-box max face it is clamped inward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MAGIC = b"DVGSNAP1"
_VERSION = 1

# corner c -> (bx, by, bz) offset bits, x fastest
CORNER_BITS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

# 3x3x3 child-corner lattice of a split voxel, x fastest: p = (pz*3 + py)*3 + px
_LATTICE27 = np.array(
    [[p % 3, (p // 3) % 3, p // 9] for p in range(27)], dtype=np.int64
)

# trilinear weight of parent corner c at lattice position p (locals in {0, .5, 1})
_W27 = np.empty((27, 8), dtype=np.float64)
for _p in range(27):
    _u = _LATTICE27[_p] / 2.0
    for _c in range(8):
        _b = CORNER_BITS[_c]
        _W27[_p, _c] = np.prod(np.where(_b == 1, _u, 1.0 - _u))

# child (dx,dy,dz) corner c sits at lattice position (dx+bx, dy+by, dz+bz)
_CHILD_CORNER_LUT = np.empty((8, 8), dtype=np.int64)
for _d in range(8):
    _dxyz = CORNER_BITS[_d]
    for _c in range(8):
        _pos = _dxyz + CORNER_BITS[_c]
        _CHILD_CORNER_LUT[_d, _c] = (_pos[2] * 3 + _pos[1]) * 3 + _pos[0]


class ConfigurationError(ValueError):
    """Invalid grid configuration (bad bbox, resolution overflow, ...)."""


class OutOfDomainError(ValueError):
    """Query point outside the grid bounding box."""


@dataclass(frozen=True)
class GridConfig:
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    base_res: tuple[int, int, int]
    max_levels: int = 4
    modality_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "bbox_min", np.asarray(self.bbox_min, dtype=np.float64))
        object.__setattr__(self, "bbox_max", np.asarray(self.bbox_max, dtype=np.float64))
        object.__setattr__(self, "base_res", tuple(int(n) for n in self.base_res))
        if self.bbox_min.shape != (3,) or self.bbox_max.shape != (3,):
            raise ConfigurationError("bbox_min/bbox_max must be 3-vectors")
        if not np.all(self.bbox_min < self.bbox_max):
            raise ConfigurationError("bbox_min must be < bbox_max componentwise")
        if len(self.base_res) != 3 or any(n < 2 for n in self.base_res):
            raise ConfigurationError("base_res components must be >= 2")
        if self.max_levels < 1:
            raise ConfigurationError("max_levels must be >= 1")
        if self.modality_dim < 1:
            raise ConfigurationError("modality_dim must be >= 1")
        # voxel keys and finest node-lattice keys must stay well inside int64
        scale = 1 << (self.max_levels - 1)
        n_finest = [(n * scale + 1) for n in self.base_res]
        if n_finest[0] * n_finest[1] * n_finest[2] >= 2**62:
            raise ConfigurationError("resolution overflows the 63-bit key range")

    @property
    def extent(self) -> np.ndarray:
        return self.bbox_max - self.bbox_min


@dataclass
class VoxelRef:
    """Handle for one active voxel: identity plus corner geometry."""

    level: int
    key: int
    table_row: int
    corner_ids: np.ndarray  # (8,) int64
    corner_positions: np.ndarray  # (8, 3) float64


@dataclass
class SubdivisionReport:
    new_node_ids: np.ndarray
    new_voxel_rows: np.ndarray
    parent_rows: np.ndarray  # aligned with new_voxel_rows (8 children per parent)
    deactivated_rows: np.ndarray
    rejected_rows: np.ndarray


@dataclass
class GridStats:
    active_per_level: list[int]
    node_count: int
    voxel_count: int
    bytes_estimate: int


@dataclass
class TraceBatch:
    """Result of tracing a batch of points: one terminal voxel per point."""

    rows: np.ndarray  # (N,) voxel table row
    levels: np.ndarray  # (N,)
    coords: np.ndarray  # (N, 3) cell coords at each point's level


def encode_key(level, ix, iy, iz, base_res):
    """Unique voxel key on the level-`level` lattice (vectorized)."""
    nx = base_res[0] << level
    ny = base_res[1] << level
    return (np.asarray(iz, dtype=np.int64) * ny + iy) * nx + ix


def decode_key(level, key, base_res):
    """Inverse of encode_key: key -> (ix, iy, iz)."""
    nx = base_res[0] << level
    ny = base_res[1] << level
    nz = base_res[2] << level
    key = np.asarray(key, dtype=np.int64)
    if np.any(key < 0) or np.any(key >= nx * ny * nz):
        raise ValueError(f"key out of range for level {level}")
    ix = key % nx
    iy = (key // nx) % ny
    iz = key // (nx * ny)
    return ix, iy, iz


class DynamicGrid:
    """Hierarchical voxel grid with append-only node/voxel stores."""

    def __init__(self, config: GridConfig):
        self.config = config
        c = config.modality_dim
        self.node_values = np.zeros((0, c), dtype=np.float64)
        self.voxel_corners = np.zeros((0, 8), dtype=np.int64)
        self.voxel_key = np.zeros(0, dtype=np.int64)
        self.voxel_level = np.zeros(0, dtype=np.int32)
        self.voxel_active = np.zeros(0, dtype=bool)
        # ordered maps: per level, keys ascending with parallel row array
        self.level_keys: list[np.ndarray] = [np.zeros(0, dtype=np.int64) for _ in range(config.max_levels)]
        self.level_rows: list[np.ndarray] = [np.zeros(0, dtype=np.int64) for _ in range(config.max_levels)]
        # node position registry (finest-lattice key -> node id), built on demand
        self._reg_keys: np.ndarray | None = None
        self._reg_ids: np.ndarray | None = None

    # -- basic geometry ----------------------------------------------------

    @property
    def node_count(self) -> int:
        return self.node_values.shape[0]

    @property
    def voxel_count(self) -> int:
        return self.voxel_corners.shape[0]

    def res_at(self, level: int) -> np.ndarray:
        return np.array([n << level for n in self.config.base_res], dtype=np.int64)

    def cell_size(self, level: int) -> np.ndarray:
        return self.config.extent / self.res_at(level)

    def node_lattice_key(self, level: int, coords: np.ndarray) -> np.ndarray:
        """Key of a node-lattice position, expressed on the finest lattice.

        Positions that coincide across levels share the same key, which is
        what makes corner deduplication work between neighbouring splits.
        """
        scale = 1 << (self.config.max_levels - 1 - level)
        f = np.asarray(coords, dtype=np.int64) * scale
        res_f = self.res_at(self.config.max_levels - 1)
        return (f[..., 2] * (res_f[1] + 1) + f[..., 1]) * (res_f[0] + 1) + f[..., 0]

    def corner_positions(self, level: int, coords: np.ndarray) -> np.ndarray:
        """World positions of the 8 corners of cell `coords` at `level`."""
        cs = self.cell_size(level)
        base = self.config.bbox_min + np.asarray(coords, dtype=np.float64) * cs
        return base[..., None, :] + CORNER_BITS[None, :, :] * cs

    # -- tracing -----------------------------------------------------------

    def trace_batch(self, x: np.ndarray) -> TraceBatch:
        """Terminal (deepest active) voxel for each point of ``x`` (N, 3).

        Descends from level 0: a child key present in the next level's index
        means the current voxel was split. Points must lie inside the bbox
        (inclusive); the max face is clamped inward.
        """
        x = np.asarray(x, dtype=np.float64)
        cfg = self.config
        if np.any(x < cfg.bbox_min) or np.any(x > cfg.bbox_max):
            raise OutOfDomainError("point(s) outside the grid bounding box")
        res0 = self.res_at(0)
        rel = (x - cfg.bbox_min) / self.cell_size(0)
        coords = np.clip(np.floor(rel).astype(np.int64), 0, res0 - 1)
        # level-0 rows were created in key order, so row == key
        rows = encode_key(0, coords[:, 0], coords[:, 1], coords[:, 2], cfg.base_res)
        levels = np.zeros(len(x), dtype=np.int32)
        for lv in range(cfg.max_levels - 1):
            keys_next = self.level_keys[lv + 1]
            if keys_next.size == 0:
                break
            alive = np.flatnonzero(levels == lv)
            if alive.size == 0:
                break
            cs = self.cell_size(lv)
            centers = cfg.bbox_min + (coords[alive] + 0.5) * cs
            child = coords[alive] * 2 + (x[alive] >= centers)
            ckeys = encode_key(lv + 1, child[:, 0], child[:, 1], child[:, 2], cfg.base_res)
            pos = np.searchsorted(keys_next, ckeys)
            pos_c = np.minimum(pos, keys_next.size - 1)
            found = keys_next[pos_c] == ckeys
            hit = alive[found]
            rows[hit] = self.level_rows[lv + 1][pos_c[found]]
            levels[hit] = lv + 1
            coords[hit] = child[found]
        return TraceBatch(rows=rows, levels=levels, coords=coords)

    def lookup(self, level: int, keys) -> np.ndarray:
        """Rows for voxel keys at `level`; -1 where absent."""
        keys = np.atleast_1d(np.asarray(keys, dtype=np.int64))
        lk = self.level_keys[level]
        out = np.full(keys.shape, -1, dtype=np.int64)
        if lk.size:
            pos = np.searchsorted(lk, keys)
            pos_c = np.minimum(pos, lk.size - 1)
            found = lk[pos_c] == keys
            out[found] = self.level_rows[level][pos_c[found]]
        return out

    # -- node registry (corner dedup) ---------------------------------------

    def _ensure_registry(self):
        if self._reg_keys is not None:
            return
        parts_k, parts_i = [], []
        for lv in range(self.config.max_levels):
            sel = np.flatnonzero(self.voxel_level == lv)
            if sel.size == 0:
                continue
            ix, iy, iz = decode_key(lv, self.voxel_key[sel], self.config.base_res)
            coords = np.stack([ix, iy, iz], axis=-1)
            node_coords = coords[:, None, :] + CORNER_BITS[None, :, :]
            parts_k.append(self.node_lattice_key(lv, node_coords).ravel())
            parts_i.append(self.voxel_corners[sel].ravel())
        keys = np.concatenate(parts_k)
        ids = np.concatenate(parts_i)
        keys, first = np.unique(keys, return_index=True)
        self._reg_keys = keys
        self._reg_ids = ids[first]

    def _registry_lookup(self, keys: np.ndarray) -> np.ndarray:
        """Node ids for finest-lattice keys; -1 where no node exists yet."""
        self._ensure_registry()
        out = np.full(keys.shape, -1, dtype=np.int64)
        if self._reg_keys.size:
            pos = np.searchsorted(self._reg_keys, keys)
            pos_c = np.minimum(pos, self._reg_keys.size - 1)
            found = self._reg_keys[pos_c] == keys
            out[found] = self._reg_ids[pos_c[found]]
        return out

    def _registry_insert(self, keys: np.ndarray, ids: np.ndarray):
        keys = np.concatenate([self._reg_keys, keys])
        ids = np.concatenate([self._reg_ids, ids])
        order = np.argsort(keys, kind="stable")
        self._reg_keys = keys[order]
        self._reg_ids = ids[order]


def init_grid(config: GridConfig) -> DynamicGrid:
    """Dense level-0 grid; boundary-node SDF 0, interior 1, radiance 0."""
    g = DynamicGrid(config)
    nx, ny, nz = config.base_res
    # node lattice (nx+1, ny+1, nz+1), x fastest
    gx, gy, gz = np.meshgrid(
        np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"
    )
    boundary = (
        (gx == 0) | (gx == nx) | (gy == 0) | (gy == ny) | (gz == 0) | (gz == nz)
    )
    sdf = np.where(boundary, 0.0, 1.0)
    values = np.zeros(((nx + 1) * (ny + 1) * (nz + 1), config.modality_dim), dtype=np.float64)

    def node_id(ix, iy, iz):
        return (iz * (ny + 1) + iy) * (nx + 1) + ix

    values[:, 0] = np.transpose(sdf, (2, 1, 0)).ravel()  # match node_id order (x fastest)
    g.node_values = values

    vx, vy, vz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    vx, vy, vz = (a.transpose(2, 1, 0).ravel() for a in (vx, vy, vz))
    keys = encode_key(0, vx, vy, vz, config.base_res)
    order = np.argsort(keys)  # already sorted by construction, keep explicit
    vx, vy, vz, keys = vx[order], vy[order], vz[order], keys[order]
    corners = np.empty((keys.size, 8), dtype=np.int64)
    for c in range(8):
        bx, by, bz = CORNER_BITS[c]
        corners[:, c] = node_id(vx + bx, vy + by, vz + bz)
    g.voxel_corners = corners
    g.voxel_key = keys
    g.voxel_level = np.zeros(keys.size, dtype=np.int32)
    g.voxel_active = np.ones(keys.size, dtype=bool)
    g.level_keys[0] = keys
    g.level_rows[0] = np.arange(keys.size, dtype=np.int64)
    return g


def trace(grid: DynamicGrid, x) -> VoxelRef:
    """Terminal voxel containing the single world point ``x``."""
    b = grid.trace_batch(np.asarray(x, dtype=np.float64)[None, :])
    row = int(b.rows[0])
    lv = int(b.levels[0])
    return VoxelRef(
        level=lv,
        key=int(grid.voxel_key[row]),
        table_row=row,
        corner_ids=grid.voxel_corners[row].copy(),
        corner_positions=grid.corner_positions(lv, b.coords[0]),
    )


def subdivide(grid: DynamicGrid, voxel_rows) -> SubdivisionReport:
    """Split each listed voxel into 8 children at level+1.

    Child-corner nodes are deduplicated against every node already existing
    at the same lattice position (parent corners, earlier neighbour splits);
    new nodes are initialized by trilinear interpolation of the parent's
    corners, so the interpolated field is unchanged by the split. Parents
    are deactivated but keep their level-index entry for descent.
    """
    rows = np.unique(np.asarray(voxel_rows, dtype=np.int64))
    ok = grid.voxel_active[rows] & (grid.voxel_level[rows] + 1 < grid.config.max_levels)
    rejected = rows[~ok]
    rows = rows[ok]
    new_nodes_all, new_rows_all = [], []
    if rows.size:
        grid._ensure_registry()
    for lv in np.unique(grid.voxel_level[rows]) if rows.size else []:
        sel = rows[grid.voxel_level[rows] == lv]
        lv = int(lv)
        ix, iy, iz = decode_key(lv, grid.voxel_key[sel], grid.config.base_res)
        coords = np.stack([ix, iy, iz], axis=-1)  # (R, 3)
        # 27-position child-corner lattice per parent, on the level lv+1 node lattice
        lat = coords[:, None, :] * 2 + _LATTICE27[None, :, :]  # (R, 27, 3)
        lat_keys = grid.node_lattice_key(lv + 1, lat)  # (R, 27)
        ids = grid._registry_lookup(lat_keys)
        parent_vals = grid.node_values[grid.voxel_corners[sel]]  # (R, 8, C)
        cand_vals = np.einsum("pc,rcm->rpm", _W27, parent_vals)  # (R, 27, C)
        missing = ids < 0
        if np.any(missing):
            mk = lat_keys[missing]
            uk, first = np.unique(mk, return_index=True)
            new_ids = grid.node_count + np.arange(uk.size, dtype=np.int64)
            grid.node_values = np.concatenate(
                [grid.node_values, cand_vals[missing][first]], axis=0
            )
            grid._registry_insert(uk, new_ids)
            # map every missing slot to its (possibly shared) new id
            ids[missing] = new_ids[np.searchsorted(uk, mk)]
            new_nodes_all.append(new_ids)
        # 8 children per parent
        child_corners = ids[:, _CHILD_CORNER_LUT]  # (R, 8 children, 8 corners)
        dx, dy, dz = CORNER_BITS[:, 0], CORNER_BITS[:, 1], CORNER_BITS[:, 2]
        ckeys = encode_key(
            lv + 1,
            coords[:, None, 0] * 2 + dx[None, :],
            coords[:, None, 1] * 2 + dy[None, :],
            coords[:, None, 2] * 2 + dz[None, :],
            grid.config.base_res,
        )  # (R, 8)
        base_row = grid.voxel_count
        n_new = sel.size * 8
        grid.voxel_corners = np.concatenate([grid.voxel_corners, child_corners.reshape(-1, 8)])
        grid.voxel_key = np.concatenate([grid.voxel_key, ckeys.ravel()])
        grid.voxel_level = np.concatenate(
            [grid.voxel_level, np.full(n_new, lv + 1, dtype=np.int32)]
        )
        grid.voxel_active = np.concatenate([grid.voxel_active, np.ones(n_new, dtype=bool)])
        grid.voxel_active[sel] = False
        lk = np.concatenate([grid.level_keys[lv + 1], ckeys.ravel()])
        lr = np.concatenate(
            [grid.level_rows[lv + 1], base_row + np.arange(n_new, dtype=np.int64)]
        )
        order = np.argsort(lk)
        grid.level_keys[lv + 1] = lk[order]
        grid.level_rows[lv + 1] = lr[order]
        new_rows_all.append(base_row + np.arange(n_new, dtype=np.int64))
    return SubdivisionReport(
        new_node_ids=np.concatenate(new_nodes_all) if new_nodes_all else np.zeros(0, np.int64),
        new_voxel_rows=np.concatenate(new_rows_all) if new_rows_all else np.zeros(0, np.int64),
        deactivated_rows=rows,
        rejected_rows=rejected,
    )


def stats(grid: DynamicGrid) -> GridStats:
    """Per-level active voxel counts plus a host-memory estimate."""
    counts = []
    for lv in range(grid.config.max_levels):
        counts.append(int(np.sum(grid.voxel_active & (grid.voxel_level == lv))))
    overhead = (
        grid.voxel_corners.nbytes
        + grid.voxel_key.nbytes
        + grid.voxel_level.nbytes
        + grid.voxel_active.nbytes
        + sum(k.nbytes + r.nbytes for k, r in zip(grid.level_keys, grid.level_rows))
    )
    return GridStats(
        active_per_level=counts,
        node_count=grid.node_count,
        voxel_count=grid.voxel_count,
        bytes_estimate=grid.node_count * grid.config.modality_dim * 4 + overhead,
    )


def validate(grid: DynamicGrid):
    """Structural integrity checks; raises AssertionError on violation."""
    assert np.all(grid.voxel_corners >= 0) and np.all(grid.voxel_corners < grid.node_count)
    nvox0 = int(np.prod(grid.config.base_res))
    assert grid.level_keys[0].size == nvox0, "level-0 index must be complete"
    for lv in range(grid.config.max_levels):
        lk, lr = grid.level_keys[lv], grid.level_rows[lv]
        assert np.all(np.diff(lk) > 0), "level keys must be strictly ascending"
        assert np.all(grid.voxel_key[lr] == lk)
        assert np.all(grid.voxel_level[lr] == lv)
    inactive = np.flatnonzero(~grid.voxel_active)
    for row in inactive:
        lv = int(grid.voxel_level[row])
        ix, iy, iz = decode_key(lv, grid.voxel_key[row], grid.config.base_res)
        dx, dy, dz = CORNER_BITS[:, 0], CORNER_BITS[:, 1], CORNER_BITS[:, 2]
        ck = encode_key(lv + 1, 2 * ix + dx, 2 * iy + dy, 2 * iz + dz, grid.config.base_res)
        assert np.all(grid.lookup(lv + 1, ck) >= 0), "deactivated voxel must have 8 children"


# -- snapshot serialization -------------------------------------------------
#
# Little-endian layout (documented in README.md):
#   magic  8s  = b"DVGSNAP1"
#   version u32, modality_dim u32
#   bbox_min f64*3, bbox_max f64*3
#   base_res u32*3, max_levels u32
#   node_count u64, values f32[node_count*C] row-major
#   voxel_count u64, corner_ids i64[voxel_count*8], level u8[...], active u8[...]
#   n_levels u32, then per level: level u32, count u64, keys i64[count], rows i64[count]


def save_grid(grid: DynamicGrid, path):
    with open(path, "wb") as f:
        f.write(_MAGIC)
        np.array([_VERSION, grid.config.modality_dim], dtype="<u4").tofile(f)
        grid.config.bbox_min.astype("<f8").tofile(f)
        grid.config.bbox_max.astype("<f8").tofile(f)
        np.array(grid.config.base_res, dtype="<u4").tofile(f)
        np.array([grid.config.max_levels], dtype="<u4").tofile(f)
        np.array([grid.node_count], dtype="<u8").tofile(f)
        grid.node_values.astype("<f4").tofile(f)
        np.array([grid.voxel_count], dtype="<u8").tofile(f)
        grid.voxel_corners.astype("<i8").tofile(f)
        grid.voxel_level.astype("<u1").tofile(f)
        grid.voxel_active.astype("<u1").tofile(f)
        np.array([grid.config.max_levels], dtype="<u4").tofile(f)
        for lv in range(grid.config.max_levels):
            np.array([lv], dtype="<u4").tofile(f)
            np.array([grid.level_keys[lv].size], dtype="<u8").tofile(f)
            grid.level_keys[lv].astype("<i8").tofile(f)
            grid.level_rows[lv].astype("<i8").tofile(f)


def load_grid(path) -> DynamicGrid:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"not a grid snapshot: bad magic {magic!r}")
        version, cdim = np.fromfile(f, dtype="<u4", count=2)
        if version != _VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        bbox_min = np.fromfile(f, dtype="<f8", count=3)
        bbox_max = np.fromfile(f, dtype="<f8", count=3)
        base_res = np.fromfile(f, dtype="<u4", count=3)
        (max_levels,) = np.fromfile(f, dtype="<u4", count=1)
        cfg = GridConfig(
            bbox_min=bbox_min,
            bbox_max=bbox_max,
            base_res=tuple(int(n) for n in base_res),
            max_levels=int(max_levels),
            modality_dim=int(cdim),
        )
        g = DynamicGrid(cfg)
        (n_nodes,) = np.fromfile(f, dtype="<u8", count=1)
        g.node_values = (
            np.fromfile(f, dtype="<f4", count=int(n_nodes) * int(cdim))
            .astype(np.float64)
            .reshape(int(n_nodes), int(cdim))
        )
        (n_vox,) = np.fromfile(f, dtype="<u8", count=1)
        g.voxel_corners = (
            np.fromfile(f, dtype="<i8", count=int(n_vox) * 8).reshape(int(n_vox), 8)
        )
        g.voxel_level = np.fromfile(f, dtype="<u1", count=int(n_vox)).astype(np.int32)
        g.voxel_active = np.fromfile(f, dtype="<u1", count=int(n_vox)).astype(bool)
        (n_levels,) = np.fromfile(f, dtype="<u4", count=1)
        g.voxel_key = np.zeros(int(n_vox), dtype=np.int64)
        for _ in range(int(n_levels)):
            (lv,) = np.fromfile(f, dtype="<u4", count=1)
            (cnt,) = np.fromfile(f, dtype="<u8", count=1)
            keys = np.fromfile(f, dtype="<i8", count=int(cnt))
            rows = np.fromfile(f, dtype="<i8", count=int(cnt))
            g.level_keys[int(lv)] = keys
            g.level_rows[int(lv)] = rows
            g.voxel_key[rows] = keys
    return g
