"""Map building: voxel allocation, keyframe policy, windowed BA.

Every tracked frame is fused: its back-projected points allocate
voxels, the keyframe policy decides retention, and a bundle-adjustment
window (a few random past keyframes plus the current frame) jointly
optimizes embeddings, decoder, and the window's keyframe poses against
the rendering losses.  The sub-map's first keyframe is the gauge
anchor and never moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .decoder import Adam
from .errors import EmptyWindow, NoSamples
from .grid import RaySampleBatch, sample_rays
from .render import render_batch
from .tracker import valid_depth_mask


@dataclass
class Keyframe:
    frame_id: int
    timestamp: float
    rgb: np.ndarray              # (H, W, 3) float in [0, 1]
    depth: np.ndarray            # (H, W) z-depth meters, 0 invalid
    pose: geometry.Pose          # camera-to-map, optimizable
    descriptor: np.ndarray = None


@dataclass
class KeyframePolicy:
    """Insert on high new-voxel ratio or after a maximum interval."""

    tau_kf: float = 0.2
    max_interval: int = 30
    frames_since: int = 0

    def update(self, n_created: int, n_observed: int) -> bool:
        self.frames_since += 1
        if n_observed > 0:
            ratio_hit = (n_created / n_observed) > self.tau_kf
        else:
            ratio_hit = n_created > 0  # ratio is infinite
        insert = ratio_hit or self.frames_since >= self.max_interval
        if insert:
            self.frames_since = 0
        return insert


@dataclass
class FuseResult:
    n_created: int
    n_observed: int
    keyframe_inserted: bool
    pose: geometry.Pose
    final_loss: float = float("nan")


def frame_pixel_rays(rng, intr, cfg, rgb, depth, pose):
    """cfg.map_rays random pixel rays from one frame (with replacement).

    Returns (origins, dirs, gt_color, gt_depth) with depth in ray-length
    units, 0 where the pixel has no usable depth.
    """
    h, w = depth.shape
    us = rng.integers(0, w, size=cfg.map_rays).astype(np.float64)
    vs = rng.integers(0, h, size=cfg.map_rays).astype(np.float64)
    origins, dirs, scale = geometry.pixel_rays(us, vs, intr, pose)
    ui, vi = us.astype(np.int64), vs.astype(np.int64)
    z = depth[vi, ui]
    ok = np.isfinite(z) & (z > 0) & (z <= cfg.depth_max)
    gt_depth = np.where(ok, z * scale, 0.0)
    gt_color = rgb[vi, ui].astype(np.float64)
    return origins, dirs, gt_color, gt_depth


class Mapper:
    """Owns all mutable state of one active sub-map."""

    def __init__(self, submap, intrinsics, cfg, rng):
        self.submap = submap
        self.intr = intrinsics
        self.cfg = cfg
        self.rng = rng
        self.policy = KeyframePolicy(cfg.tau_kf, cfg.kf_interval)
        self.emb_adam = Adam(cfg.lr_embeddings)
        self.dec_adam = Adam(cfg.lr_decoder)
        self.pose_adam = Adam(cfg.lr_pose_ba)
        self.iteration_hook = None  # called after every BA iteration

    # ------------------------------------------------------------------

    def allocate_from_frame(self, frame, pose: geometry.Pose):
        """Allocate voxels for the frame's valid back-projected points.

        Returns (n_created, n_observed) voxel counts feeding the
        keyframe policy.  MapExtentExceeded propagates to the caller
        (sub-map rollover) before any voxel is touched.
        """
        cfg = self.cfg
        valid = valid_depth_mask(frame.depth, cfg.depth_max)
        vs, us = np.nonzero(valid)
        if us.shape[0] == 0:
            return 0, 0
        pts_cam = geometry.backproject_batch(
            us.astype(np.float64), vs.astype(np.float64),
            frame.depth[vs, us], self.intr,
        )
        pts_map = pose.apply(pts_cam)
        return self.submap.grid.allocate_points(pts_map)

    def fuse_frame(self, frame, pose: geometry.Pose, ba_iters=None) -> FuseResult:
        """Allocate, maybe insert a keyframe, then run the BA window."""
        n_created, n_observed = self.allocate_from_frame(frame, pose)
        insert = self.policy.update(n_created, n_observed)
        kf = None
        if insert:
            kf = Keyframe(frame.index, frame.timestamp, frame.rgb, frame.depth,
                          pose.copy())
            self.submap.keyframes.append(kf)
        iters = self.cfg.ba_iters if ba_iters is None else ba_iters
        final_pose, final_loss = self.bundle_adjust(frame, pose, kf, iters)
        if kf is not None:
            final_pose = kf.pose
        return FuseResult(n_created, n_observed, insert, final_pose, final_loss)

    # ------------------------------------------------------------------

    def _window(self, current_kf):
        """Past keyframes joining the current frame in BA.

        The newest past keyframe is always present so fresh geometry
        keeps getting supervision; the rest are drawn at random.
        """
        past = [k for k in self.submap.keyframes if k is not current_kf]
        if not past:
            return []
        rest = past[:-1]
        take = min(self.cfg.window_size - 1, len(rest))
        chosen = []
        if take > 0:
            idx = self.rng.choice(len(rest), size=take, replace=False)
            chosen = [rest[i] for i in sorted(idx)]
        return chosen + [past[-1]]

    def _frame_rays(self, rgb, depth, pose):
        """Random pixel rays for one window frame (map-frame geometry)."""
        return frame_pixel_rays(self.rng, self.intr, self.cfg, rgb, depth, pose)

    def bundle_adjust(self, frame, frame_pose, current_kf, iterations):
        """Joint window optimization; returns (current pose, last loss).

        The window holds the current frame plus past keyframes.
        Embeddings, decoder, and every non-anchor pose in the window
        step together, the current frame's included; refining the
        freshly tracked pose against the multi-view field stops pose
        error from being baked into the map.  Raises
        :class:`EmptyWindow` when there is nothing to optimize against.
        """
        submap, cfg = self.submap, self.cfg
        if frame is None and not submap.keyframes:
            raise EmptyWindow("no frames available for bundle adjustment")
        anchor = submap.anchor
        loss = float("nan")
        current_pose = frame_pose.copy() if frame is not None else None
        for _ in range(int(iterations)):
            window = self._window(current_kf)
            entries = []  # (rgb, depth, pose-owner, optimizable)
            for kf in window:
                entries.append((kf.rgb, kf.depth, kf, kf is not anchor))
            if current_kf is not None:
                entries.append((current_kf.rgb, current_kf.depth, current_kf,
                                current_kf is not anchor))
            elif frame is not None:
                entries.append((frame.rgb, frame.depth, None,
                                cfg.ba_refine_current))
            if not entries:
                raise EmptyWindow("bundle adjustment window is empty")

            parts = [self._frame_rays(rgb, depth,
                                      owner.pose if owner is not None else current_pose)
                     for rgb, depth, owner, _ in entries]
            origins = np.concatenate([p[0] for p in parts])
            dirs = np.concatenate([p[1] for p in parts])
            gt_color = np.concatenate([p[2] for p in parts])
            gt_depth = np.concatenate([p[3] for p in parts])
            frame_index = np.repeat(np.arange(len(entries)), cfg.map_rays)
            try:
                batch = sample_rays(
                    submap.grid, origins, dirs, gt_color, gt_depth,
                    step=cfg.step, tr=cfg.tr, max_hits=cfg.max_hits,
                    max_distance=cfg.depth_max, frame_index=frame_index,
                    drop_behind=True,
                )
            except NoSamples:
                break
            grid = submap.grid
            grid.embedding_grads[...] = 0.0
            self.submap.decoder.zero_grads()
            ctx = render_batch(batch, grid.embeddings, submap.decoder, cfg.tr,
                               grid.voxel_size, lambdas=cfg.lambdas)
            loss = ctx.losses.total
            ctx.backward(grid.embedding_grads)
            twists = ctx.pose_twist_grads()

            self.emb_adam.step("emb", grid.embeddings, grid.embedding_grads)
            self.dec_adam.step_params(submap.decoder.params, submap.decoder.grads)
            for g, (_, _, owner, optimizable) in enumerate(entries):
                if not optimizable:
                    continue
                xi = np.zeros(6)
                if owner is None:
                    self.pose_adam.step(f"frame{frame.index}", xi, twists[g])
                    current_pose = geometry.compose(geometry.exp_se3(xi),
                                                    current_pose)
                else:
                    self.pose_adam.step(f"kf{owner.frame_id}", xi, twists[g])
                    owner.pose = geometry.compose(geometry.exp_se3(xi),
                                                  owner.pose)
            submap.bump_version()
            if self.iteration_hook is not None:
                self.iteration_hook()
        if current_kf is not None:
            current = current_kf.pose
        else:
            current = current_pose if current_pose is not None else frame_pose
        return current, loss
