"""RGB-D dataset directory loading and trajectory file io."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from PIL import Image

from .errors import MalformedDataset
from .geometry import Intrinsics, Pose, quaternion_to_rotation, rotation_to_quaternion

DEPTH_SCALE = 1000.0


@dataclass
class Frame:
    """One RGB-D observation; rgb in [0, 1], depth in meters (0 = invalid)."""

    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray


def read_trajectory(path) -> Tuple[np.ndarray, List[Pose]]:
    """Timestamped poses from 'ts tx ty tz qx qy qz qw' lines."""
    stamps = []
    poses = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise MalformedDataset(
                    f"{path}:{ln}: expected 8 fields, got {len(parts)}"
                )
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise MalformedDataset(f"{path}:{ln}: non-numeric field") from None
            stamps.append(vals[0])
            q = np.array(vals[4:8])
            n = np.linalg.norm(q)
            if n < 1e-12:
                raise MalformedDataset(f"{path}:{ln}: zero quaternion")
            poses.append(Pose(quaternion_to_rotation(q / n), np.array(vals[1:4])))
    return np.array(stamps), poses


def write_trajectory(path, stamps, poses) -> None:
    """Inverse of :func:`read_trajectory`; 9 significant digits per value."""
    with open(path, "w") as fh:
        for ts, pose in zip(stamps, poses):
            q = rotation_to_quaternion(pose.rotation)
            t = pose.translation
            vals = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
            fh.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


def _load_rgb(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def _load_depth(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise MalformedDataset(f"{path}: unsupported depth dtype {arr.dtype}")
    return arr.astype(np.float64) / DEPTH_SCALE


class RGBDDataset:
    """TUM-style dataset directory.

    Expects rgb/, depth/, associations.txt and intrinsics.txt; an optional
    groundtruth.txt provides the reference trajectory.  Frames are loaded
    lazily by index.
    """

    def __init__(self, root):
        self.root = str(root)
        intr_path = os.path.join(self.root, "intrinsics.txt")
        assoc_path = os.path.join(self.root, "associations.txt")
        if not os.path.isfile(intr_path):
            raise MalformedDataset(f"{intr_path}: missing")
        if not os.path.isfile(assoc_path):
            raise MalformedDataset(f"{assoc_path}: missing")
        with open(intr_path) as fh:
            parts = fh.read().split()
        if len(parts) != 6:
            raise MalformedDataset(
                f"{intr_path}: expected 'fx fy cx cy width height', got {len(parts)} fields"
            )
        try:
            fx, fy, cx, cy = (float(p) for p in parts[:4])
            w, h = int(parts[4]), int(parts[5])
        except ValueError:
            raise MalformedDataset(f"{intr_path}: non-numeric field") from None
        self.intrinsics = Intrinsics(fx, fy, cx, cy, w, h)

        self._records = []
        with open(assoc_path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise MalformedDataset(
                        f"{assoc_path}:{ln}: expected 'ts rgb ts depth', got {len(parts)} fields"
                    )
                try:
                    t_rgb = float(parts[0])
                    t_depth = float(parts[2])
                except ValueError:
                    raise MalformedDataset(f"{assoc_path}:{ln}: non-numeric timestamp") from None
                self._records.append((t_rgb, parts[1], t_depth, parts[3]))

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, index: int) -> Frame:
        t_rgb, rgb_rel, _, depth_rel = self._records[index]
        rgb_path = os.path.join(self.root, rgb_rel)
        depth_path = os.path.join(self.root, depth_rel)
        for p in (rgb_path, depth_path):
            if not os.path.isfile(p):
                raise MalformedDataset(f"{p}: missing image file")
        rgb = _load_rgb(rgb_path)
        depth = _load_depth(depth_path)
        if depth.shape != rgb.shape[:2]:
            raise MalformedDataset(
                f"{depth_path}: depth {depth.shape} does not match rgb {rgb.shape[:2]}"
            )
        return Frame(index, t_rgb, rgb, depth)

    def frames(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([r[0] for r in self._records])

    def groundtruth(self) -> Tuple[np.ndarray, List[Pose]]:
        path = os.path.join(self.root, "groundtruth.txt")
        if not os.path.isfile(path):
            raise MalformedDataset(f"{path}: missing")
        return read_trajectory(path)
