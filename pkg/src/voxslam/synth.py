"""Synthetic RGB-D sequence generation from analytic scenes.

Scenes are unions of solid primitives with exact ray intersections and
exact signed distances, so generated depth is free of discretization
error and reconstructions can be scored against the true surface.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from PIL import Image

from .errors import CameraInsideGeometry, ConfigError
from .geometry import Intrinsics, Pose, rotation_to_quaternion
from .meshing import Mesh, merge_meshes

DEPTH_SCALE = 1000.0  # meters -> 16-bit png units (millimeters)

# fixed plaid-like color field: per channel a direction and phase
_COLOR_FREQ = np.array([
    [1.3, 0.9, 0.7],
    [0.8, 1.7, 1.1],
    [0.6, 1.2, 2.3],
])
_COLOR_PHASE = np.array([0.0, 2.0, 4.0])

_PALETTE = np.array([
    [0.85, 0.45, 0.30],
    [0.35, 0.65, 0.85],
    [0.55, 0.80, 0.40],
    [0.80, 0.70, 0.35],
    [0.60, 0.45, 0.75],
    [0.75, 0.75, 0.75],
])


def _vec(x, n=3):
    a = np.asarray(x, dtype=np.float64).reshape(n)
    return a


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = _vec(self.center)
        self.radius = float(self.radius)
        if self.color is not None:
            self.color = _vec(self.color)


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = _vec(self.center)
        self.half = _vec(self.half)
        if self.color is not None:
            self.color = _vec(self.color)


@dataclass
class RoomShell:
    """Solid walls everywhere outside an inner box; the camera lives inside."""

    center: np.ndarray
    half: np.ndarray
    color: Optional[np.ndarray] = None

    def __post_init__(self):
        self.center = _vec(self.center)
        self.half = _vec(self.half)
        if self.color is not None:
            self.color = _vec(self.color)


@dataclass
class SceneSpec:
    """Scene + trajectory + camera description for a generated sequence."""

    primitives: List[object] = field(default_factory=list)
    trajectory: dict = field(default_factory=dict)
    n_frames: int = 100
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 79.5
    cy: float = 59.5
    color_mode: str = "sine"
    noise_sigma0: float = 0.0
    noise_sigma1: float = 0.0
    fps: float = 30.0

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy,
                          self.width, self.height)

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            if isinstance(p, Sphere):
                d = {"type": "sphere", "center": list(map(float, p.center)),
                     "radius": float(p.radius)}
            elif isinstance(p, Box):
                d = {"type": "box", "center": list(map(float, p.center)),
                     "half": list(map(float, p.half))}
            elif isinstance(p, RoomShell):
                d = {"type": "room", "center": list(map(float, p.center)),
                     "half": list(map(float, p.half))}
            else:
                raise TypeError(f"unknown primitive {type(p).__name__}")
            if p.color is not None:
                d["color"] = list(map(float, p.color))
            prims.append(d)
        return {
            "primitives": prims,
            "trajectory": self.trajectory,
            "n_frames": self.n_frames,
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "color_mode": self.color_mode,
            "noise_sigma0": self.noise_sigma0,
            "noise_sigma1": self.noise_sigma1,
            "fps": self.fps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = []
        for i, pd in enumerate(d.get("primitives", [])):
            kind = pd.get("type")
            color = _vec(pd["color"]) if "color" in pd else None
            if kind == "sphere":
                prims.append(Sphere(_vec(pd["center"]), float(pd["radius"]), color))
            elif kind == "box":
                prims.append(Box(_vec(pd["center"]), _vec(pd["half"]), color))
            elif kind == "room":
                prims.append(RoomShell(_vec(pd["center"]), _vec(pd["half"]), color))
            else:
                raise ConfigError(f"primitive {i}: unknown type {kind!r}")
        kwargs = {k: d[k] for k in (
            "trajectory", "n_frames", "width", "height", "fx", "fy", "cx", "cy",
            "color_mode", "noise_sigma0", "noise_sigma1", "fps") if k in d}
        return cls(primitives=prims, **kwargs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SceneSpec":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ----------------------------------------------------------------------
# signed distance and exact ray casting

def _box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


def primitive_sdf(prim, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if isinstance(prim, Sphere):
        return np.linalg.norm(p - prim.center, axis=-1) - prim.radius
    if isinstance(prim, Box):
        return _box_sdf(p, prim.center, prim.half)
    if isinstance(prim, RoomShell):
        # solid is the complement of the inner box
        return -_box_sdf(p, prim.center, prim.half)
    raise TypeError(f"unknown primitive {type(prim).__name__}")


def scene_sdf(spec: SceneSpec, points: np.ndarray) -> np.ndarray:
    """Exact signed distance to the union of solids (negative inside)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not spec.primitives:
        return np.full(p.shape[0], np.inf)
    return np.min([primitive_sdf(pr, p) for pr in spec.primitives], axis=0)


def _ray_sphere(o, d, center, radius):
    oc = o - center
    b = np.einsum("nd,nd->n", oc, d)
    disc = b * b - (np.einsum("nd,nd->n", oc, oc) - radius * radius)
    t = np.full(o.shape[0], np.inf)
    ok = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    near = -b - sq
    far = -b + sq
    # nearest intersection strictly in front of the origin
    cand = np.where(near > 1e-9, near, far)
    t[ok & (cand > 1e-9)] = cand[ok & (cand > 1e-9)]
    return t


def _box_slabs(o, d, center, half):
    lo = center - half
    hi = center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    # zero direction components: ray parallel to the slab
    par_in = np.abs(d) < 1e-15
    t1 = np.where(par_in, -np.inf, t1)
    t2 = np.where(par_in, np.inf, t2)
    miss = par_in & ((o < lo) | (o > hi))
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    tn = np.where(miss, np.inf, tn)
    tf = np.where(miss, -np.inf, tf)
    return tn.max(axis=-1), tf.min(axis=-1)


def _ray_box(o, d, center, half):
    t_enter, t_exit = _box_slabs(o, d, center, half)
    t = np.full(o.shape[0], np.inf)
    hit = (t_exit >= t_enter) & (t_enter > 1e-9)
    t[hit] = t_enter[hit]
    return t


def _ray_room(o, d, center, half):
    # origin inside the inner box; walls start where the free box ends
    t_enter, t_exit = _box_slabs(o, d, center, half)
    t = np.full(o.shape[0], np.inf)
    hit = (t_exit >= t_enter) & (t_exit > 1e-9)
    t[hit] = t_exit[hit]
    return t


def ray_cast(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray):
    """First intersection along unit rays: (t, primitive index), inf/-1 on miss."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    best_t = np.full(o.shape[0], np.inf)
    best_id = np.full(o.shape[0], -1, dtype=np.int64)
    for i, prim in enumerate(spec.primitives):
        if isinstance(prim, Sphere):
            t = _ray_sphere(o, d, prim.center, prim.radius)
        elif isinstance(prim, Box):
            t = _ray_box(o, d, prim.center, prim.half)
        elif isinstance(prim, RoomShell):
            t = _ray_room(o, d, prim.center, prim.half)
        else:
            raise TypeError(f"unknown primitive {type(prim).__name__}")
        closer = t < best_t
        best_t[closer] = t[closer]
        best_id[closer] = i
    return best_t, best_id


def surface_color(spec: SceneSpec, prim_id: np.ndarray, points: np.ndarray):
    """View-independent RGB at surface points."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    ids = np.asarray(prim_id, dtype=np.int64).reshape(-1)
    base = np.empty((p.shape[0], 3))
    for i, prim in enumerate(spec.primitives):
        c = prim.color if prim.color is not None else _PALETTE[i % len(_PALETTE)]
        base[ids == i] = c
    base[ids < 0] = 0.0
    if spec.color_mode == "flat":
        return base
    if spec.color_mode != "sine":
        raise ConfigError(f"unknown color_mode {spec.color_mode!r}")
    mod = 0.55 + 0.45 * np.sin(2.0 * np.pi * (p @ _COLOR_FREQ.T) + _COLOR_PHASE)
    return np.clip(base * mod, 0.0, 1.0)


# ----------------------------------------------------------------------
# trajectories

def _look_rotation(forward: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation looking along `forward` (x right, y down, z ahead)."""
    f = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(f, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(f, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def trajectory_poses(spec: SceneSpec) -> List[Pose]:
    """Camera-to-world poses for every frame of the spec's trajectory."""
    traj = spec.trajectory
    kind = traj.get("kind")
    n = spec.n_frames
    if n < 1:
        raise ConfigError("n_frames must be positive")
    if kind == "circle":
        center = _vec(traj.get("center", [0.0, 0.0, 0.0]))
        radius = float(traj.get("radius", 1.0))
        turns = float(traj.get("turns", 1.0))
        phase = float(traj.get("phase", 0.0))
        look_at = _vec(traj.get("look_at", center))
        amp = float(traj.get("look_z_amplitude", 0.0))
        cycles = float(traj.get("look_cycles", 1.0))
        poses = []
        for i in range(n):
            th = phase + 2.0 * np.pi * turns * i / n
            pos = center + radius * np.array([np.cos(th), np.sin(th), 0.0])
            target = look_at + np.array([0.0, 0.0, amp * np.sin(cycles * th)])
            poses.append(Pose(_look_rotation(target - pos), pos))
        return poses
    if kind == "lemniscate":
        center = _vec(traj.get("center", [0.0, 0.0, 0.0]))
        a = float(traj.get("a", 1.0))
        phase = float(traj.get("phase", 0.0))
        def point(th):
            s, c = np.sin(th), np.cos(th)
            den = 1.0 + s * s
            return center + np.array([a * c / den, a * s * c / den, 0.0])
        poses = []
        for i in range(n):
            th = phase + 2.0 * np.pi * i / n
            fwd = point(th + 1e-4) - point(th - 1e-4)
            poses.append(Pose(_look_rotation(fwd), point(th)))
        return poses
    if kind == "waypoints":
        pts = np.asarray(traj["points"], dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ConfigError("waypoints need at least two 3d points")
        look = traj.get("look_at")
        looks = None if look is None else np.asarray(look, dtype=np.float64)
        poses = []
        for i in range(n):
            s = (pts.shape[0] - 1) * (i / max(n - 1, 1))
            seg = min(int(s), pts.shape[0] - 2)
            u = s - seg
            pos = (1 - u) * pts[seg] + u * pts[seg + 1]
            if looks is None:
                fwd = pts[seg + 1] - pts[seg]
            elif looks.ndim == 1:
                fwd = looks - pos
            else:
                tgt = (1 - u) * looks[seg] + u * looks[seg + 1]
                fwd = tgt - pos
            poses.append(Pose(_look_rotation(fwd), pos))
        return poses
    raise ConfigError(f"unknown trajectory kind {kind!r}")


# ----------------------------------------------------------------------
# frame rendering

def render_views(spec: SceneSpec, pose: Pose):
    """Ground-truth (rgb (H,W,3) in [0,1], z-depth (H,W), 0 where no hit)."""
    intr = spec.intrinsics
    H, W = intr.height, intr.width
    us, vs = np.meshgrid(np.arange(W, dtype=np.float64),
                         np.arange(H, dtype=np.float64))
    x = (us - intr.cx) / intr.fx
    y = (vs - intr.cy) / intr.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1).reshape(-1, 3)
    scale = np.linalg.norm(d_cam, axis=-1)
    d_world = (d_cam / scale[:, None]) @ pose.rotation.T
    o = np.broadcast_to(pose.translation, d_world.shape)
    t, pid = ray_cast(spec, o, d_world)
    hit = np.isfinite(t)
    z = np.zeros(t.shape[0])
    z[hit] = t[hit] / scale[hit]
    pts = o[hit] + t[hit, None] * d_world[hit]
    rgb = np.zeros((t.shape[0], 3))
    rgb[hit] = surface_color(spec, pid[hit], pts)
    return rgb.reshape(H, W, 3), z.reshape(H, W)


def _check_camera_free(spec: SceneSpec, pos: np.ndarray, frame: int,
                       margin: float = 0.02) -> None:
    d = float(scene_sdf(spec, pos[None])[0])
    if d <= margin:
        raise CameraInsideGeometry(
            f"frame {frame}: camera at {pos.round(3).tolist()} is "
            f"{d:.4f} m from solid geometry (needs > {margin})"
        )


def depth_to_png(depth_m: np.ndarray) -> np.ndarray:
    q = np.rint(depth_m * DEPTH_SCALE)
    return np.clip(q, 0, 65535).astype(np.uint16)


def rgb_to_png(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def generate_sequence(spec: SceneSpec, out_dir, seed: int = 0) -> str:
    """Render the spec into a dataset directory; returns the path.

    Layout: rgb/%06d.png, depth/%06d.png (16-bit, millimeters, 0 invalid),
    associations.txt, groundtruth.txt, intrinsics.txt, scene.json.
    Regenerating with the same spec and seed is bit-identical.
    """
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    rng = np.random.default_rng(seed)
    poses = trajectory_poses(spec)
    assoc = []
    gt_lines = []
    for i, pose in enumerate(poses):
        _check_camera_free(spec, pose.translation, i)
        rgb, z = render_views(spec, pose)
        if spec.noise_sigma0 > 0.0 or spec.noise_sigma1 > 0.0:
            sigma = spec.noise_sigma0 + spec.noise_sigma1 * z * z
            noise = rng.normal(0.0, 1.0, z.shape) * sigma
            z = np.where(z > 0.0, np.maximum(z + noise, 0.0), 0.0)
        ts = i / spec.fps
        rgb_name = f"rgb/{i:06d}.png"
        depth_name = f"depth/{i:06d}.png"
        Image.fromarray(rgb_to_png(rgb)).save(os.path.join(out_dir, rgb_name))
        dimg = Image.fromarray(depth_to_png(z), mode="I;16")
        dimg.save(os.path.join(out_dir, depth_name))
        assoc.append(f"{ts:.6f} {rgb_name} {ts:.6f} {depth_name}")
        q = rotation_to_quaternion(pose.rotation)
        tx, ty, tz = pose.translation
        vals = [ts, tx, ty, tz, q[0], q[1], q[2], q[3]]
        gt_lines.append(" ".join(f"{v:.9g}" for v in vals))
    with open(os.path.join(out_dir, "associations.txt"), "w") as fh:
        fh.write("\n".join(assoc) + "\n")
    with open(os.path.join(out_dir, "groundtruth.txt"), "w") as fh:
        fh.write("\n".join(gt_lines) + "\n")
    intr = spec.intrinsics
    with open(os.path.join(out_dir, "intrinsics.txt"), "w") as fh:
        fh.write(f"{intr.fx:.9g} {intr.fy:.9g} {intr.cx:.9g} {intr.cy:.9g} "
                 f"{intr.width} {intr.height}\n")
    spec.save(os.path.join(out_dir, "scene.json"))
    return out_dir


# ----------------------------------------------------------------------
# analytic reference meshes

def _grid_patch(corner, e1, e2, n1, n2):
    """Triangulated rectangle: corner + u*e1 + v*e2, u,v in [0,1]."""
    u = np.linspace(0.0, 1.0, n1 + 1)
    v = np.linspace(0.0, 1.0, n2 + 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    verts = (corner[None, :]
             + U.reshape(-1, 1) * e1[None, :]
             + V.reshape(-1, 1) * e2[None, :])
    idx = np.arange((n1 + 1) * (n2 + 1)).reshape(n1 + 1, n2 + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(verts, faces.astype(np.int64))


def _box_faces_mesh(center, half, step):
    meshes = []
    for axis in range(3):
        for sign in (-1.0, 1.0):
            e1 = np.zeros(3)
            e2 = np.zeros(3)
            a1, a2 = [i for i in range(3) if i != axis]
            e1[a1] = 2.0 * half[a1]
            e2[a2] = 2.0 * half[a2]
            corner = np.array(center, dtype=np.float64) - half
            corner[axis] = center[axis] + sign * half[axis]
            n1 = max(1, int(np.ceil(e1[a1] / step)))
            n2 = max(1, int(np.ceil(e2[a2] / step)))
            meshes.append(_grid_patch(corner, e1, e2, n1, n2))
    return merge_meshes(meshes)


def _sphere_mesh(center, radius, step):
    n_lat = max(8, int(np.ceil(np.pi * radius / step)))
    n_lon = 2 * n_lat
    lat = np.linspace(0.0, np.pi, n_lat + 1)
    lon = np.linspace(0.0, 2.0 * np.pi, n_lon + 1)
    LA, LO = np.meshgrid(lat, lon, indexing="ij")
    verts = center + radius * np.stack(
        [np.sin(LA) * np.cos(LO), np.sin(LA) * np.sin(LO), np.cos(LA)], axis=-1
    ).reshape(-1, 3)
    idx = np.arange((n_lat + 1) * (n_lon + 1)).reshape(n_lat + 1, n_lon + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return Mesh(verts, faces.astype(np.int64))


def make_gt_mesh(spec: SceneSpec, step: float = 0.05) -> Mesh:
    """Triangulated analytic surfaces of every primitive, colored."""
    meshes = []
    ids = []
    for i, prim in enumerate(spec.primitives):
        if isinstance(prim, Sphere):
            m = _sphere_mesh(prim.center, prim.radius, step)
        elif isinstance(prim, (Box, RoomShell)):
            m = _box_faces_mesh(prim.center, prim.half, step)
        else:
            raise TypeError(f"unknown primitive {type(prim).__name__}")
        meshes.append(m)
        ids.append(np.full(m.n_vertices, i, dtype=np.int64))
    if not meshes:
        raise ConfigError("scene has no primitives")
    mesh = merge_meshes(meshes)
    mesh.colors = surface_color(spec, np.concatenate(ids), mesh.vertices)
    return mesh
