"""Triangle mesh extraction from the learned field, plus PLY round-trip."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import morton
from ._mc_tables import CORNER_SHIFTS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE
from .decoder import Decoder
from .errors import EmptyMap, EmptyMesh
from .geometry import Pose
from .grid import VoxelGrid

# rows pushed through the decoder at a time; keeps transient buffers small
_DECODE_CHUNK = 200_000

# per edge: offset of its low endpoint within the cell, and the axis it runs along
_EDGE_BASE = np.minimum(
    CORNER_SHIFTS[EDGE_CORNERS[:, 0]], CORNER_SHIFTS[EDGE_CORNERS[:, 1]]
)
_EDGE_AXIS = np.argmax(
    CORNER_SHIFTS[EDGE_CORNERS[:, 0]] != CORNER_SHIFTS[EDGE_CORNERS[:, 1]], axis=1
).astype(np.int64)
_CASE_BITS = 1 << np.arange(8, dtype=np.int64)


@dataclass
class Mesh:
    """Indexed triangle soup; colors are per-vertex RGB in [0, 1] or None."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: Optional[np.ndarray] = None

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def transformed(self, pose: Pose) -> "Mesh":
        v = self.vertices @ pose.rotation.T + pose.translation
        c = None if self.colors is None else self.colors.copy()
        return Mesh(v, self.faces.copy(), c)

    def copy(self) -> "Mesh":
        c = None if self.colors is None else self.colors.copy()
        return Mesh(self.vertices.copy(), self.faces.copy(), c)


def merge_meshes(meshes) -> Mesh:
    """Concatenate meshes, offsetting face indices. Order is preserved."""
    meshes = [m for m in meshes if m.n_vertices > 0]
    if not meshes:
        raise EmptyMesh("no vertices in any input mesh")
    verts = []
    faces = []
    colors = []
    offset = 0
    has_color = all(m.colors is not None for m in meshes)
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        if has_color:
            colors.append(m.colors)
        offset += m.n_vertices
    return Mesh(
        np.concatenate(verts, axis=0),
        np.concatenate(faces, axis=0),
        np.concatenate(colors, axis=0) if has_color else None,
    )


def _lattice_key(coords: np.ndarray, side: int) -> np.ndarray:
    c = coords.astype(np.int64)
    return (c[..., 0] * side + c[..., 1]) * side + c[..., 2]


def _field_values(grid: VoxelGrid, decoder: Decoder, points: np.ndarray):
    """SDF at map-frame points; invalid points marked in the returned mask."""
    n = points.shape[0]
    sdf = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    for lo in range(0, n, _DECODE_CHUNK):
        hi = min(lo + _DECODE_CHUNK, n)
        rows, weights, _, ok = grid.interp_setup(points[lo:hi])
        feats = np.einsum("nj,njd->nd", weights, grid.embeddings[rows])
        sdf[lo:hi] = decoder.decode_sdf(feats)
        valid[lo:hi] = ok
    return sdf, valid


def _vertex_colors(grid: VoxelGrid, decoder: Decoder, points: np.ndarray) -> np.ndarray:
    n = points.shape[0]
    colors = np.zeros((n, 3))
    for lo in range(0, n, _DECODE_CHUNK):
        hi = min(lo + _DECODE_CHUNK, n)
        rows, weights, _, ok = grid.interp_setup(points[lo:hi])
        feats = np.einsum("nj,njd->nd", weights, grid.embeddings[rows])
        _, c = decoder.decode(feats)
        colors[lo:hi] = np.where(ok[:, None], c, 0.5)
    return colors


def extract_mesh(
    grid: VoxelGrid,
    decoder: Decoder,
    samples_per_voxel_axis: int = 4,
    transform: Optional[Pose] = None,
    with_colors: bool = True,
) -> Mesh:
    """Zero-crossing surface of the decoded SDF over the allocated voxels.

    The field is sampled on a lattice aligned across the whole map
    (``samples_per_voxel_axis`` cells per voxel edge), so neighbouring
    voxels share lattice planes and the surface is seamless.  Cells with
    any corner outside allocated voxels are skipped.  Voxels are visited
    in sorted key order and vertices are keyed by lattice edge, making
    the output deterministic.  ``transform`` maps the result out of the
    map frame when given.
    """
    spv = int(samples_per_voxel_axis)
    if not 1 <= spv <= 16:
        raise ValueError(f"samples_per_voxel_axis must be in [1, 16], got {spv}")
    keys = grid.voxel_keys
    if keys.shape[0] == 0:
        raise EmptyMap("no voxels allocated")

    vx, vy, vz = morton.decode(np.sort(keys))
    vox = np.stack([vx, vy, vz], axis=1)  # (n, 3) grid coords, key-sorted
    h = grid.voxel_size / spv
    side = grid.res * spv + 2  # lattice key stride

    # unique lattice sample points over all allocated voxels
    axis_local = np.arange(spv + 1, dtype=np.int64)
    li, lj, lk = np.meshgrid(axis_local, axis_local, axis_local, indexing="ij")
    local_pts = np.stack([li, lj, lk], axis=-1).reshape(-1, 3)
    pts_lattice = (vox[:, None, :] * spv + local_pts[None, :, :]).reshape(-1, 3)
    pkeys = np.unique(_lattice_key(pts_lattice, side))
    del pts_lattice
    coords = np.empty((pkeys.shape[0], 3), dtype=np.int64)
    coords[:, 2] = pkeys % side
    rem = pkeys // side
    coords[:, 1] = rem % side
    coords[:, 0] = rem // side
    positions = grid.origin + coords * h
    sdf, valid = _field_values(grid, decoder, positions)

    # cells: spv^3 per voxel, disjoint across voxels
    axis_cell = np.arange(spv, dtype=np.int64)
    ci, cj, ck = np.meshgrid(axis_cell, axis_cell, axis_cell, indexing="ij")
    local_cells = np.stack([ci, cj, ck], axis=-1).reshape(-1, 3)
    cells = (vox[:, None, :] * spv + local_cells[None, :, :]).reshape(-1, 3)

    corner_keys = _lattice_key(cells[:, None, :] + CORNER_SHIFTS[None, :, :], side)
    corner_idx = np.searchsorted(pkeys, corner_keys)
    usable = valid[corner_idx].all(axis=1)
    corner_sdf = sdf[corner_idx]
    case = ((corner_sdf < 0.0).astype(np.int64) * _CASE_BITS).sum(axis=1)
    active = usable & (EDGE_TABLE[case] != 0)
    if not np.any(active):
        raise EmptyMesh("field has no sign change inside allocated voxels")
    cells = cells[active]
    case = case[active]

    # triangle corners as (cell, edge) pairs in table order
    tri_edges = TRI_TABLE[case].astype(np.int64)  # (m, 16)
    keep = tri_edges >= 0
    cell_of = np.broadcast_to(np.arange(cells.shape[0])[:, None], tri_edges.shape)[keep]
    edge_of = tri_edges[keep]

    base_pts = cells[cell_of] + _EDGE_BASE[edge_of]
    axes = _EDGE_AXIS[edge_of]
    ekeys = _lattice_key(base_pts, side) * 3 + axes
    uniq, first, inverse = np.unique(ekeys, return_index=True, return_inverse=True)
    faces = inverse.reshape(-1, 3).astype(np.int64)

    # vertex on each crossing edge by linear interpolation of the field
    a = base_pts[first]
    ax = axes[first]
    b = a.copy()
    b[np.arange(b.shape[0]), ax] += 1
    ia = np.searchsorted(pkeys, _lattice_key(a, side))
    ib = np.searchsorted(pkeys, _lattice_key(b, side))
    va = sdf[ia]
    vb = sdf[ib]
    t = np.clip(va / (va - vb), 0.0, 1.0)
    verts = grid.origin + a * h
    verts[np.arange(verts.shape[0]), ax] += t * h

    colors = _vertex_colors(grid, decoder, verts) if with_colors else None
    mesh = Mesh(verts, faces, colors)
    if transform is not None:
        mesh = mesh.transformed(transform)
    return mesh


# ----------------------------------------------------------------------
# PLY io (binary little-endian, xyz + uchar rgb)

_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {nv}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face {nf}
property list uchar int vertex_indices
end_header
"""


def write_ply(path, mesh: Mesh) -> None:
    """Write a mesh as binary little-endian PLY with per-vertex colors."""
    v = np.asarray(mesh.vertices, dtype=np.float32)
    if mesh.colors is None:
        rgb = np.full((v.shape[0], 3), 128, dtype=np.uint8)
    else:
        rgb = np.clip(np.rint(np.asarray(mesh.colors) * 255.0), 0, 255).astype(np.uint8)
    f = np.asarray(mesh.faces, dtype=np.int32)

    vert_rec = np.zeros(
        v.shape[0],
        dtype=np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)]),
    )
    vert_rec["xyz"] = v
    vert_rec["rgb"] = rgb
    face_rec = np.zeros(
        f.shape[0], dtype=np.dtype([("n", "u1"), ("idx", "<i4", 3)])
    )
    face_rec["n"] = 3
    face_rec["idx"] = f

    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER.format(nv=v.shape[0], nf=f.shape[0]).encode("ascii"))
        fh.write(vert_rec.tobytes())
        fh.write(face_rec.tobytes())


def read_ply(path) -> Mesh:
    """Read a PLY written by :func:`write_ply`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a ply file")
    header = blob[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: unsupported ply format")
    nv = nf = 0
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
    body = blob[end + len(b"end_header\n"):]
    vert_dt = np.dtype([("xyz", "<f4", 3), ("rgb", "u1", 3)])
    face_dt = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
    need = nv * vert_dt.itemsize + nf * face_dt.itemsize
    if len(body) < need:
        raise ValueError(f"{path}: truncated ply payload")
    vert_rec = np.frombuffer(body[: nv * vert_dt.itemsize], dtype=vert_dt)
    face_rec = np.frombuffer(
        body[nv * vert_dt.itemsize : need], dtype=face_dt
    )
    if nf and not np.all(face_rec["n"] == 3):
        raise ValueError(f"{path}: non-triangle face present")
    return Mesh(
        vert_rec["xyz"].astype(np.float64),
        face_rec["idx"].astype(np.int64),
        vert_rec["rgb"].astype(np.float64) / 255.0,
    )
