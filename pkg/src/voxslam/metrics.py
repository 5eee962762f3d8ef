"""Trajectory and surface quality metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoAssociations
from .geometry import Intrinsics, Pose
from .meshing import Mesh

ASSOC_MAX_DT = 0.02


def associate(stamps_a: np.ndarray, stamps_b: np.ndarray,
              max_dt: float = ASSOC_MAX_DT) -> Tuple[np.ndarray, np.ndarray]:
    """Index pairs (ia, ib) matching each a-stamp to its nearest b-stamp.

    Pairs farther apart than ``max_dt`` are dropped.  Raises
    :class:`NoAssociations` when nothing matches.
    """
    a = np.asarray(stamps_a, dtype=np.float64)
    b = np.asarray(stamps_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise NoAssociations("empty timestamp list")
    order = np.argsort(b)
    bs = b[order]
    pos = np.searchsorted(bs, a)
    lo = np.clip(pos - 1, 0, bs.size - 1)
    hi = np.clip(pos, 0, bs.size - 1)
    pick = np.where(np.abs(bs[hi] - a) < np.abs(bs[lo] - a), hi, lo)
    keep = np.abs(bs[pick] - a) <= max_dt
    if not np.any(keep):
        raise NoAssociations(f"no timestamp pairs within {max_dt} s")
    return np.nonzero(keep)[0], order[pick[keep]]


def align_rigid(src: np.ndarray, dst: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(R, t) minimizing sum ||R src + t - dst||^2 (no scale)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def trajectory_error_stats(errors: np.ndarray) -> dict:
    """rmse / mean / median of per-pose position errors."""
    e = np.asarray(errors, dtype=np.float64)
    return {
        "rmse": float(np.sqrt(np.mean(e * e))),
        "mean": float(np.mean(e)),
        "median": float(np.median(e)),
        "n_pairs": int(e.size),
    }


@dataclass
class ATEResult:
    rmse: float
    mean: float
    median: float
    n_pairs: int
    rotation: np.ndarray
    translation: np.ndarray

    def as_dict(self) -> dict:
        return {"rmse": self.rmse, "mean": self.mean,
                "median": self.median, "n_pairs": self.n_pairs}


def absolute_trajectory_error(est_stamps, est_poses: List[Pose],
                              gt_stamps, gt_poses: List[Pose],
                              max_dt: float = ASSOC_MAX_DT) -> ATEResult:
    """Position RMSE after closed-form rigid alignment of matched poses."""
    ia, ib = associate(est_stamps, gt_stamps, max_dt)
    est = np.stack([est_poses[i].translation for i in ia])
    gt = np.stack([gt_poses[i].translation for i in ib])
    R, t = align_rigid(est, gt)
    errors = np.linalg.norm(est @ R.T + t - gt, axis=1)
    stats = trajectory_error_stats(errors)
    return ATEResult(stats["rmse"], stats["mean"], stats["median"],
                     stats["n_pairs"], R, t)


# ----------------------------------------------------------------------
# surface metrics

def sample_mesh_points(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted surface samples; deterministic given the generator state."""
    v = mesh.vertices
    f = mesh.faces
    a = v[f[:, 0]]
    ab = v[f[:, 1]] - a
    ac = v[f[:, 2]] - a
    areas = 0.5 * np.linalg.norm(np.cross(ab, ac), axis=1)
    total = areas.sum()
    if total <= 0.0 or f.shape[0] == 0:
        raise ValueError("mesh has no surface area to sample")
    tri = rng.choice(f.shape[0], size=n, p=areas / total)
    u = rng.random(n)
    w = rng.random(n)
    over = u + w > 1.0
    u[over] = 1.0 - u[over]
    w[over] = 1.0 - w[over]
    return a[tri] + u[:, None] * ab[tri] + w[:, None] * ac[tri]


def point_set_metrics(recon_pts: np.ndarray, gt_pts: np.ndarray,
                      threshold: float = 0.05) -> dict:
    """Directed point-cloud distances between reconstruction and reference.

    accuracy: mean recon->gt distance; completion: mean gt->recon distance;
    completion_ratio: fraction of reference points with a reconstructed
    point within ``threshold``.  *_sq are the squared-distance means.
    """
    gt_tree = cKDTree(gt_pts)
    re_tree = cKDTree(recon_pts)
    d_acc, _ = gt_tree.query(recon_pts, k=1)
    d_comp, _ = re_tree.query(gt_pts, k=1)
    return {
        "accuracy": float(np.mean(d_acc)),
        "completion": float(np.mean(d_comp)),
        "completion_ratio": float(np.mean(d_comp < threshold)),
        "accuracy_sq": float(np.mean(d_acc ** 2)),
        "completion_sq": float(np.mean(d_comp ** 2)),
    }


def mesh_metrics(recon: Mesh, gt: Mesh, n_samples: int = 100_000,
                 threshold: float = 0.05, seed: int = 0) -> dict:
    """Point-sampled surface metrics between two meshes."""
    rng = np.random.default_rng(seed)
    recon_pts = sample_mesh_points(recon, n_samples, rng)
    gt_pts = sample_mesh_points(gt, n_samples, rng)
    return point_set_metrics(recon_pts, gt_pts, threshold)


def observed_surface_points(depths, poses: List[Pose], intr: Intrinsics,
                            stride: int = 4, depth_max: float = 8.0) -> np.ndarray:
    """World-frame back-projections of valid depth pixels, subsampled."""
    pts = []
    for depth, pose in zip(depths, poses):
        d = depth[::stride, ::stride]
        vs, us = np.nonzero((d > 0.0) & (d <= depth_max))
        if us.size == 0:
            continue
        z = d[vs, us]
        x = (us * stride - intr.cx) / intr.fx * z
        y = (vs * stride - intr.cy) / intr.fy * z
        cam = np.stack([x, y, z], axis=1)
        pts.append(cam @ pose.rotation.T + pose.translation)
    if not pts:
        return np.zeros((0, 3))
    return np.concatenate(pts, axis=0)
