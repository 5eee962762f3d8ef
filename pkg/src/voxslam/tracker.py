"""Frame-to-map camera tracking.

Each frame starts from the previous pose (zero motion model) and is
refined by minimizing the rendering losses over a 6-DoF increment while
the map stays frozen.  The increment left-multiplies the camera-to-map
pose and is re-linearized at zero every iteration; its Adam moments
persist across iterations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .decoder import Adam
from .errors import NoSamples, TrackingLost
from .grid import sample_rays
from .render import render_batch


@dataclass
class TrackingResult:
    pose: geometry.Pose          # camera-to-map
    loss: float
    iterations: int
    converged: bool
    hit_fraction: float
    depth_residual: float


def valid_depth_mask(depth: np.ndarray, depth_max: float) -> np.ndarray:
    d = np.asarray(depth)
    return np.isfinite(d) & (d > 0) & (d <= depth_max)


def sample_pixel_batch(rng, mask: np.ndarray, count: int):
    """Draw up to ``count`` distinct pixels where mask holds; (us, vs)."""
    vs_idx, us_idx = np.nonzero(mask)
    n = us_idx.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros(0)
    take = min(count, n)
    sel = rng.choice(n, size=take, replace=False)
    return us_idx[sel].astype(np.float64), vs_idx[sel].astype(np.float64)


def build_frame_batch(grid, frame, pose, intr, us, vs, cfg, frame_gt_depth=None):
    """RaySampleBatch for the given pixels of one frame.

    Ground-truth z-depth is converted to ray-length depth so it is
    directly comparable with sample distances along the unit ray.
    """
    origins, dirs, scale = geometry.pixel_rays(us, vs, intr, pose)
    ui = us.astype(np.int64)
    vi = vs.astype(np.int64)
    depth = frame.depth if frame_gt_depth is None else frame_gt_depth
    z = depth[vi, ui]
    ok = np.isfinite(z) & (z > 0) & (z <= cfg.depth_max)
    gt_depth_ray = np.where(ok, z * scale, 0.0)
    gt_color = frame.rgb[vi, ui].astype(np.float64)
    return sample_rays(
        grid, origins, dirs, gt_color, gt_depth_ray,
        step=cfg.step, tr=cfg.tr, max_hits=cfg.max_hits,
        max_distance=cfg.depth_max, drop_behind=True,
    )


def track_frame(frame, grid, decoder, prev_pose, intr, cfg, rng) -> TrackingResult:
    """Estimate the frame's camera-to-map pose against a frozen map.

    Raises :class:`TrackingLost` when too few rays hit the map (< 5% of
    the sampled pixels) or the final depth residual exceeds the lost
    threshold.
    """
    pose = prev_pose.copy()
    if cfg.track_iters == 0:
        return TrackingResult(pose, float("nan"), 0, False, float("nan"), float("nan"))

    adam = Adam(cfg.lr_pose_track)
    valid = valid_depth_mask(frame.depth, cfg.depth_max)
    loss = float("nan")
    depth_residual = float("nan")
    hit_fraction = 0.0
    converged = False
    iterations = 0

    for it in range(cfg.track_iters):
        if cfg.track_lr_decay != 1.0 and it == cfg.track_iters // 2:
            # coarse phase done; restart with a finer step so the last
            # iterations settle instead of orbiting the optimum
            adam = Adam(cfg.lr_pose_track * cfg.track_lr_decay)
        us, vs = sample_pixel_batch(rng, valid, cfg.track_pixels)
        if us.shape[0] == 0:
            raise TrackingLost(0.0, float("inf"))
        try:
            batch = build_frame_batch(grid, frame, pose, intr, us, vs, cfg)
        except NoSamples:
            raise TrackingLost(0.0, float("inf")) from None
        hit_fraction = float(batch.rays_hit.mean())
        if hit_fraction < cfg.min_hit_fraction:
            raise TrackingLost(hit_fraction, float("inf"))
        ctx = render_batch(batch, grid.embeddings, decoder, cfg.tr,
                           grid.voxel_size, lambdas=cfg.lambdas)
        loss = ctx.losses.total
        depth_residual = ctx.losses.depth
        ctx.backward(pose_only=True)  # map stays frozen
        twist_grad = ctx.pose_twist_grads()[0]
        xi = np.zeros(6)
        adam.step("xi", xi, twist_grad)
        pose = geometry.compose(geometry.exp_se3(xi), pose)
        iterations += 1
        if np.linalg.norm(xi) < cfg.track_conv_tol:
            converged = True
            break

    if depth_residual > cfg.lost_depth_threshold:
        raise TrackingLost(hit_fraction, depth_residual)
    return TrackingResult(pose, loss, iterations, converged, hit_fraction,
                          depth_residual)
