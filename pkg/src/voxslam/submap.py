"""Sub-map lifecycle: one self-contained map unit and its snapshots.

A sub-map owns a voxel grid, an embedding table, a decoder, and its
keyframes, plus a world-from-map pose.  Frozen sub-maps keep their
embeddings and decoder byte-identical forever; only their pose fields
may move during loop optimization.  Snapshots are deep copies served to
readers (tracker, mesher) so training never races a render.

Serialized container (little-endian), one file per sub-map:
  magic "VXF2" | u32 submap id | u32 k | f64 voxel_size | u32 embedding_dim
  | u32 n_voxels | u32 n_corners | u8 frozen
  | map pose: 9 f64 rotation row-major + 3 f64 translation
  | voxel keys: n_voxels u64
  | corner rows: n_voxels * 8 i64
  | embeddings: n_corners * embedding_dim f64
  | decoder dims: u32 trunk_layers | u32 hidden | u32 color_hidden
  | decoder params, layer-major f64 in fixed parameter order
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import geometry
from .decoder import Decoder
from .grid import CORNER_OFFSETS, VoxelGrid
from .morton import decode as morton_decode

MAGIC = b"VXF2"


def frozen_grid_copy(grid: VoxelGrid) -> VoxelGrid:
    """Read-only deep copy of the grid's query state (no allocator)."""
    g = VoxelGrid.__new__(VoxelGrid)
    g.k = grid.k
    g.res = grid.res
    g.voxel_size = grid.voxel_size
    g.embedding_dim = grid.embedding_dim
    g.rng = None  # allocation is forbidden on copies
    g.origin = grid.origin.copy()
    g.occupancy = grid.occupancy.copy()
    g._corner_lookup = grid._corner_lookup.copy()
    g._n_voxels = grid.n_voxels
    g._n_corners = grid.n_corners
    g._keys = grid.voxel_keys.copy()
    g._corner_rows = grid.corner_rows.copy()
    g._emb = grid.embeddings.copy()
    g._emb_grad = np.zeros_like(g._emb)
    return g


@dataclass
class MapSnapshot:
    """Immutable view of one sub-map for readers."""

    submap_id: int
    version: int
    grid: VoxelGrid
    decoder: Decoder
    pose_world: geometry.Pose


class SubMap:
    """Map unit: grid + decoder + keyframes + world pose."""

    def __init__(self, submap_id: int, grid: VoxelGrid, decoder: Decoder,
                 pose_world: geometry.Pose = None):
        self.id = int(submap_id)
        self.grid = grid
        self.decoder = decoder
        self.keyframes = []
        self.pose_world = pose_world.copy() if pose_world else geometry.Pose.identity()
        self.frozen = False
        self._version = 0

    @property
    def anchor(self):
        return self.keyframes[0] if self.keyframes else None

    def freeze(self):
        self.frozen = True

    def bump_version(self):
        self._version += 1

    def snapshot(self) -> MapSnapshot:
        return MapSnapshot(
            submap_id=self.id,
            version=self._version,
            grid=frozen_grid_copy(self.grid),
            decoder=self.decoder.clone(),
            pose_world=self.pose_world.copy(),
        )

    def state_digest(self) -> str:
        """SHA-256 over embeddings and decoder parameters (not poses)."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.grid.embeddings).tobytes())
        for name in sorted(self.decoder.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.decoder.params[name]).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # serialization

    def save(self, path):
        grid, dec = self.grid, self.decoder
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIdIIIB", self.id, grid.k, grid.voxel_size,
                                 grid.embedding_dim, grid.n_voxels,
                                 grid.n_corners, int(self.frozen)))
            pose = np.concatenate([self.pose_world.rotation.reshape(-1),
                                   self.pose_world.translation])
            fh.write(pose.astype("<f8").tobytes())
            fh.write(grid.voxel_keys.astype("<u8").tobytes())
            fh.write(np.ascontiguousarray(grid.corner_rows).astype("<i8").tobytes())
            fh.write(np.ascontiguousarray(grid.embeddings).astype("<f8").tobytes())
            fh.write(struct.pack("<III", dec.trunk_layers, dec.hidden,
                                 dec.color_hidden))
            for name in dec.params:
                fh.write(np.ascontiguousarray(dec.params[name]).astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "SubMap":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a map container (bad magic)")
        off = 4
        submap_id, k, voxel_size, dim, n_vox, n_cor, frozen = struct.unpack_from(
            "<IIdIIIB", data, off)
        off += struct.calcsize("<IIdIIIB")
        pose_vals = np.frombuffer(data, "<f8", 12, off)
        off += 12 * 8
        pose = geometry.Pose(pose_vals[:9].reshape(3, 3).copy(), pose_vals[9:].copy())
        keys = np.frombuffer(data, "<u8", n_vox, off).copy()
        off += n_vox * 8
        rows = np.frombuffer(data, "<i8", n_vox * 8, off).reshape(n_vox, 8).copy()
        off += n_vox * 8 * 8
        emb = np.frombuffer(data, "<f8", n_cor * dim, off).reshape(n_cor, dim).copy()
        off += n_cor * dim * 8
        trunk_layers, hidden, color_hidden = struct.unpack_from("<III", data, off)
        off += 12

        grid = VoxelGrid(k=k, voxel_size=voxel_size, embedding_dim=dim,
                         rng=np.random.default_rng(0))
        grid._grow_voxels(n_vox)
        grid._grow_corners(n_cor)
        grid._n_voxels = n_vox
        grid._n_corners = n_cor
        grid._keys[:n_vox] = keys
        grid._corner_rows[:n_vox] = rows
        grid._emb[:n_cor] = emb
        if n_vox:
            x, y, z = morton_decode(keys)
            grid.occupancy[x, y, z] = np.arange(n_vox, dtype=np.int32)
            corners = np.stack([x, y, z], axis=1)[:, None, :] + CORNER_OFFSETS[None]
            grid._corner_lookup[corners[..., 0], corners[..., 1],
                                corners[..., 2]] = rows.astype(np.int32)

        dec = Decoder(embedding_dim=dim, hidden=hidden, trunk_layers=trunk_layers,
                      color_hidden=color_hidden, rng=np.random.default_rng(0))
        for name in dec.params:
            shape = dec.params[name].shape
            n = int(np.prod(shape))
            dec.params[name] = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += n * 8
        dec.grads = {k2: np.zeros_like(v) for k2, v in dec.params.items()}

        sm = SubMap(submap_id, grid, dec, pose_world=pose)
        sm.frozen = bool(frozen)
        return sm
