"""Sparse voxel map: allocation, corner-shared embeddings, ray sampling.

The map covers a fixed cube of 2^k voxels per axis centered on the map
frame origin.  Occupied voxels get a slot in dense per-voxel arrays;
their 8 corners index into a shared embedding table so adjacent voxels
reuse corner features.  Ray queries walk the occupancy lookup with the
compiled DDA kernel (or its fallback) and produce fixed-step sample
batches used by the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend, morton
from .errors import MapExtentExceeded, NoSamples, PointNotInMap

# corner j sits at offset bits (j & 1, (j >> 1) & 1, (j >> 2) & 1)
CORNER_OFFSETS = np.array(
    [[(j >> a) & 1 for a in range(3)] for j in range(8)], dtype=np.int64
)

MAX_GRID_BITS = 8  # 256^3 occupancy lookup is the largest we allow


class VoxelGrid:
    """Dynamically growing sparse voxel volume with corner embeddings.

    Parameters
    ----------
    k : grid is 2^k voxels per axis (1..8)
    voxel_size : edge length in meters
    embedding_dim : features per corner
    rng : seeded generator used to initialize new embeddings
    """

    def __init__(self, k=6, voxel_size=0.2, embedding_dim=16, rng=None):
        if not 1 <= k <= MAX_GRID_BITS:
            raise ValueError(f"k must be in [1, {MAX_GRID_BITS}], got {k}")
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.k = int(k)
        self.res = 1 << self.k
        self.voxel_size = float(voxel_size)
        self.embedding_dim = int(embedding_dim)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        half = 0.5 * self.res * self.voxel_size
        self.origin = np.full(3, -half)  # map-frame position of corner (0,0,0)
        self.occupancy = np.full((self.res,) * 3, -1, dtype=np.int32)
        # dense corner lattice -> embedding row, -1 if absent
        self._corner_lookup = np.full((self.res + 1,) * 3, -1, dtype=np.int32)
        self._n_voxels = 0
        self._n_corners = 0
        self._keys = np.zeros(64, dtype=np.uint64)
        self._corner_rows = np.zeros((64, 8), dtype=np.int64)
        self._emb = np.zeros((128, self.embedding_dim))
        self._emb_grad = np.zeros((128, self.embedding_dim))

    # ------------------------------------------------------------------
    # storage

    @property
    def n_voxels(self) -> int:
        return self._n_voxels

    @property
    def n_corners(self) -> int:
        return self._n_corners

    @property
    def voxel_keys(self) -> np.ndarray:
        return self._keys[: self._n_voxels]

    @property
    def corner_rows(self) -> np.ndarray:
        return self._corner_rows[: self._n_voxels]

    @property
    def embeddings(self) -> np.ndarray:
        return self._emb[: self._n_corners]

    @property
    def embedding_grads(self) -> np.ndarray:
        return self._emb_grad[: self._n_corners]

    @property
    def half_extent(self) -> float:
        return 0.5 * self.res * self.voxel_size

    def _grow_voxels(self, extra: int):
        need = self._n_voxels + extra
        cap = self._keys.shape[0]
        if need > cap:
            while cap < need:
                cap *= 2
            self._keys = np.resize(self._keys, cap)
            rows = np.zeros((cap, 8), dtype=np.int64)
            rows[: self._n_voxels] = self._corner_rows[: self._n_voxels]
            self._corner_rows = rows

    def _grow_corners(self, extra: int):
        need = self._n_corners + extra
        cap = self._emb.shape[0]
        if need > cap:
            while cap < need:
                cap *= 2
            emb = np.zeros((cap, self.embedding_dim))
            emb[: self._n_corners] = self._emb[: self._n_corners]
            self._emb = emb
            grad = np.zeros((cap, self.embedding_dim))
            grad[: self._n_corners] = self._emb_grad[: self._n_corners]
            self._emb_grad = grad

    # ------------------------------------------------------------------
    # allocation

    def voxel_coords_of(self, points: np.ndarray) -> np.ndarray:
        """Integer voxel coords of map-frame points (no range check)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((p - self.origin) / self.voxel_size).astype(np.int64)

    def allocate_points(self, points: np.ndarray) -> tuple[int, int]:
        """Ensure every map-frame point lies in an allocated voxel.

        Returns (n_created, n_observed): how many of the distinct voxels
        touched by the points were newly allocated, and how many were
        touched in total.  Raises :class:`MapExtentExceeded` before any
        mutation if a point falls outside the grid cube.
        """
        cells = self.voxel_coords_of(points)
        if cells.shape[0] == 0:
            return 0, 0
        if np.any((cells < 0) | (cells >= self.res)):
            raise MapExtentExceeded(
                f"points outside the {self.res}^3 voxel extent"
            )
        keys = morton.encode(cells[:, 0], cells[:, 1], cells[:, 2])
        uniq = np.unique(keys)  # sorted: deterministic creation order
        ux, uy, uz = morton.decode(uniq)
        existing = self.occupancy[ux, uy, uz] >= 0
        new_idx = np.flatnonzero(~existing)
        n_observed = uniq.shape[0]
        n_created = new_idx.shape[0]
        if n_created == 0:
            return 0, n_observed

        nx, ny, nz = ux[new_idx], uy[new_idx], uz[new_idx]
        self._grow_voxels(n_created)
        slots = np.arange(self._n_voxels, self._n_voxels + n_created)
        self.occupancy[nx, ny, nz] = slots.astype(np.int32)
        self._keys[slots] = uniq[new_idx]

        # resolve the 8 corners of each new voxel on the shared lattice
        corners = np.stack([nx, ny, nz], axis=1)[:, None, :] + CORNER_OFFSETS[None]
        cx, cy, cz = corners[..., 0], corners[..., 1], corners[..., 2]
        rows = self._corner_lookup[cx, cy, cz].astype(np.int64)
        missing = rows < 0
        if np.any(missing):
            side = self.res + 1
            flat = (cx[missing] * side + cy[missing]) * side + cz[missing]
            uniq_flat = np.unique(flat)  # sorted: deterministic init order
            n_new = uniq_flat.shape[0]
            self._grow_corners(n_new)
            new_rows = np.arange(self._n_corners, self._n_corners + n_new)
            fx = uniq_flat // (side * side)
            fy = (uniq_flat // side) % side
            fz = uniq_flat % side
            self._corner_lookup[fx, fy, fz] = new_rows.astype(np.int32)
            self._emb[new_rows] = self.rng.uniform(
                -1e-4, 1e-4, size=(n_new, self.embedding_dim)
            )
            self._emb_grad[new_rows] = 0.0
            self._n_corners += n_new
            rows[missing] = self._corner_lookup[cx[missing], cy[missing], cz[missing]]
        self._corner_rows[slots] = rows
        self._n_voxels += n_created
        return n_created, n_observed

    # ------------------------------------------------------------------
    # interpolation

    def interp_setup(self, points: np.ndarray):
        """Trilinear interpolation scaffolding for map-frame points.

        Returns (rows (N,8), weights (N,8), fracs (N,3), valid (N,)).
        Invalid points (outside the extent or in unallocated voxels) get
        row 0 / zero weights and valid = False.
        """
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        g = (p - self.origin) / self.voxel_size
        cells = np.floor(g).astype(np.int64)
        inside = np.all((cells >= 0) & (cells < self.res), axis=1)
        safe = np.where(inside[:, None], cells, 0)
        slot = self.occupancy[safe[:, 0], safe[:, 1], safe[:, 2]].astype(np.int64)
        valid = inside & (slot >= 0)
        slot = np.where(valid, slot, 0)
        fr = g - cells
        weights = trilerp_weights(fr)
        rows = self._corner_rows[slot]
        if self._n_voxels == 0:
            rows = np.zeros((p.shape[0], 8), dtype=np.int64)
        weights = np.where(valid[:, None], weights, 0.0)
        return rows, weights, fr, valid

    def trilerp(self, points: np.ndarray):
        """Interpolated corner features at map-frame points.

        Returns (features (N, D), weights (N, 8)).  Raises
        :class:`PointNotInMap` if any point is outside allocated voxels.
        """
        rows, weights, _, valid = self.interp_setup(points)
        if not np.all(valid):
            raise PointNotInMap(
                f"{int((~valid).sum())} of {valid.shape[0]} points not in allocated voxels"
            )
        feats = np.einsum("nj,njd->nd", weights, self.embeddings[rows])
        return feats, weights

    # ------------------------------------------------------------------
    # ray queries

    def ray_hits(self, origins, dirs, t_near, t_far, max_hits):
        """Ordered occupied-voxel intervals along each ray (DDA walk)."""
        return backend.ray_voxel_hits(
            origins, dirs, t_near, t_far,
            self.occupancy, self.origin, self.voxel_size, max_hits,
        )


def trilerp_weights(fracs: np.ndarray) -> np.ndarray:
    """(N, 8) corner weights from fractional positions in [0, 1]^3."""
    f = np.asarray(fracs, dtype=np.float64).reshape(-1, 3)
    one = 1.0 - f
    per_axis = np.stack([one, f], axis=0)  # (2, N, 3)
    w = np.empty((f.shape[0], 8))
    for j in range(8):
        w[:, j] = (
            per_axis[j & 1, :, 0]
            * per_axis[(j >> 1) & 1, :, 1]
            * per_axis[(j >> 2) & 1, :, 2]
        )
    return w


def trilerp_weight_grads(fracs: np.ndarray) -> np.ndarray:
    """(N, 8, 3) derivative of each corner weight w.r.t. the fraction."""
    f = np.asarray(fracs, dtype=np.float64).reshape(-1, 3)
    one = 1.0 - f
    per_axis = np.stack([one, f], axis=0)
    sign = np.array([[1.0 if (j >> a) & 1 else -1.0 for a in range(3)] for j in range(8)])
    g = np.empty((f.shape[0], 8, 3))
    for j in range(8):
        b = [(j >> a) & 1 for a in range(3)]
        g[:, j, 0] = sign[j, 0] * per_axis[b[1], :, 1] * per_axis[b[2], :, 2]
        g[:, j, 1] = sign[j, 1] * per_axis[b[0], :, 0] * per_axis[b[2], :, 2]
        g[:, j, 2] = sign[j, 2] * per_axis[b[0], :, 0] * per_axis[b[1], :, 1]
    return g


@dataclass
class RaySampleBatch:
    """Fixed-step samples along rays, ready for rendering.

    Flat sample arrays indexed by ``ray_index``; per-ray ground truth and
    geometry ride along.  ``t`` is distance along the (unit) ray, strictly
    increasing within each ray.  Label masks partition supervised samples:
    free space (ahead of the surface band), truncation (inside the band),
    behind (past the band; dropped from rendering and every loss).  Rays
    with invalid ground-truth depth have all three masks False.
    """

    origins: np.ndarray          # (R, 3) map frame
    dirs: np.ndarray             # (R, 3) unit
    gt_color: np.ndarray         # (R, 3) in [0, 1]
    gt_depth: np.ndarray         # (R,) ray-length depth, <= 0 invalid
    ray_index: np.ndarray        # (S,) int
    t: np.ndarray                # (S,)
    positions: np.ndarray        # (S, 3) map frame
    corner_rows: np.ndarray      # (S, 8)
    weights: np.ndarray          # (S, 8)
    fracs: np.ndarray            # (S, 3)
    free_mask: np.ndarray        # (S,) bool
    trunc_mask: np.ndarray       # (S,) bool
    behind_mask: np.ndarray      # (S,) bool
    n_rays: int
    rays_hit: np.ndarray         # (R,) bool: ray produced >= 1 sample
    frame_index: np.ndarray = field(default=None)  # (R,) int, multi-frame batches

    @property
    def n_samples(self) -> int:
        return self.t.shape[0]


def merge_intervals(t_in, t_out, counts, tol=1e-9):
    """Merge contiguous hit intervals per ray.

    Input arrays are (R, H) padded rows from the DDA; returns flat
    (ray_idx, seg_t0, seg_t1) for merged segments where consecutive
    intervals within ``tol`` of touching are joined.
    """
    counts = np.asarray(counts)
    n, h = t_in.shape
    valid = np.arange(h)[None, :] < counts[:, None]
    ray_of = np.repeat(np.arange(n), counts)
    tin = t_in[valid]
    tout = t_out[valid]
    if tin.shape[0] == 0:
        return ray_of, tin, tout
    first = np.ones(tin.shape[0], dtype=bool)
    same_ray = ray_of[1:] == ray_of[:-1]
    contiguous = (tin[1:] - tout[:-1]) <= tol
    first[1:] = ~(same_ray & contiguous)
    starts = np.flatnonzero(first)
    ends = np.append(starts[1:], tin.shape[0]) - 1
    return ray_of[starts], tin[starts], tout[ends]


def sample_segments(seg_ray, seg_t0, seg_t1, step):
    """Centered fixed-step samples inside merged segments.

    Each segment of length L gets n = max(1, floor(L/step + 1e-9))
    samples spaced ``step`` apart, centered so leftover length splits
    evenly between the two ends.  Returns flat (ray_idx, t).
    """
    length = seg_t1 - seg_t0
    n = np.maximum(1, np.floor(length / step + 1e-9).astype(np.int64))
    start = seg_t0 + (length - (n - 1) * step) / 2.0
    total = int(n.sum())
    ray_idx = np.repeat(seg_ray, n)
    base = np.repeat(start, n)
    offsets = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    return ray_idx, base + offsets * step


def sample_rays(
    grid: VoxelGrid,
    origins: np.ndarray,
    dirs: np.ndarray,
    gt_color: np.ndarray,
    gt_depth: np.ndarray,
    step: float,
    tr: float,
    max_hits: int = 64,
    max_distance: float = 8.0,
    frame_index: np.ndarray = None,
    drop_behind: bool = False,
) -> RaySampleBatch:
    """Build a RaySampleBatch by marching rays through the grid.

    ``gt_depth`` is ray-length depth (not z-depth); non-positive or
    non-finite entries mark rays without depth supervision.  With
    ``drop_behind`` samples past the supervised surface (t > depth + tr)
    are not emitted at all; they are excluded from rendering and every
    loss anyway, so skipping them only saves decode work.  Raises
    :class:`NoSamples` when no ray intersects any voxel.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    t_near = np.zeros(n)
    t_far = np.full(n, float(max_distance))
    ids, t_in, t_out, counts = grid.ray_hits(origins, dirs, t_near, t_far, max_hits)
    seg_ray, seg_t0, seg_t1 = merge_intervals(t_in, t_out, counts)
    ray_idx, t = sample_segments(seg_ray, seg_t0, seg_t1, step)
    if t.shape[0] == 0:
        raise NoSamples("no ray intersects an allocated voxel")

    gt_depth = np.asarray(gt_depth, dtype=np.float64).reshape(-1)
    gt_color = np.asarray(gt_color, dtype=np.float64).reshape(-1, 3)
    rays_hit = np.zeros(n, dtype=bool)
    rays_hit[ray_idx] = True
    if drop_behind:
        d = gt_depth[ray_idx]
        keep = ~(np.isfinite(d) & (d > 0) & (t > d + tr))
        ray_idx, t = ray_idx[keep], t[keep]
        if t.shape[0] == 0:
            raise NoSamples("every sample lies behind its supervised surface")

    pos = origins[ray_idx] + t[:, None] * dirs[ray_idx]
    rows, weights, fracs, valid = grid.interp_setup(pos)
    if not np.all(valid):
        # samples landing exactly on a voxel face can resolve to an
        # unallocated neighbor; nudge them back inside their segment
        bad = np.flatnonzero(~valid)
        for s in bad:
            for eps in (-1e-9, 1e-9):
                p2 = origins[ray_idx[s]] + (t[s] + eps) * dirs[ray_idx[s]]
                r2, w2, f2, v2 = grid.interp_setup(p2[None])
                if v2[0]:
                    rows[s], weights[s], fracs[s] = r2[0], w2[0], f2[0]
                    valid[s] = True
                    break
        if not np.all(valid):
            keep = valid
            ray_idx, t, pos = ray_idx[keep], t[keep], pos[keep]
            rows, weights, fracs = rows[keep], weights[keep], fracs[keep]
    if t.shape[0] == 0:
        raise NoSamples("no ray intersects an allocated voxel")

    d = gt_depth[ray_idx]
    supervised = np.isfinite(d) & (d > 0)
    free = supervised & (t < d - tr)
    trunc = supervised & (np.abs(d - t) <= tr)
    behind = supervised & (t > d + tr)

    return RaySampleBatch(
        origins=origins,
        dirs=dirs,
        gt_color=gt_color,
        gt_depth=gt_depth,
        ray_index=ray_idx,
        t=t,
        positions=pos,
        corner_rows=rows,
        weights=weights,
        fracs=fracs,
        free_mask=free,
        trunc_mask=trunc,
        behind_mask=behind,
        n_rays=n,
        rays_hit=rays_hit,
        frame_index=frame_index,
    )
