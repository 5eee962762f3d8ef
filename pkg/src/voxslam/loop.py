"""Loop closure across sub-maps.

Keyframes carry a compact appearance descriptor; revisits are proposed
by cosine similarity against keyframes of non-active sub-maps, verified
by casting rays into the matched map, and resolved by optimizing the
source sub-map's world pose and the query keyframe's in-map pose
against the matched map's field (the matched map itself never moves).
A per-map bundle adjustment pass then fine-tunes keyframe poses.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import geometry
from .decoder import Adam
from .errors import NoSamples, OptimizationDiverged
from .geometry import Intrinsics, Pose
from .grid import sample_rays
from .mapper import Keyframe, frame_pixel_rays
from .render import render_batch
from .submap import SubMap
from .tracker import sample_pixel_batch, valid_depth_mask

DESCRIPTOR_DIM = 512
_SIDE = 16  # tiny-image edge length; two 16x16 channels -> 512 entries

# consecutive loss increases tolerated before declaring divergence
DIVERGENCE_PATIENCE = 10


def _tiny_image(channel: np.ndarray, side: int = _SIDE) -> np.ndarray:
    """Block-mean downsample to side x side using near-equal bins."""
    h, w = channel.shape
    rb = (np.arange(side) * h) // side
    cb = (np.arange(side) * w) // side
    sums = np.add.reduceat(np.add.reduceat(channel, rb, axis=0), cb, axis=1)
    rc = np.diff(np.append(rb, h)).astype(np.float64)
    cc = np.diff(np.append(cb, w)).astype(np.float64)
    return sums / np.outer(rc, cc)


def compute_descriptor(rgb: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Unit-norm 512-D appearance vector for one RGB-D frame.

    Grayscale and depth are each reduced to a 16x16 tiny image,
    zero-meaned per channel, concatenated, and L2-normalized.  Invalid
    depth pixels contribute their raw zeros.
    """
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    g = _tiny_image(gray)
    d = _tiny_image(np.asarray(depth, dtype=np.float64))
    v = np.concatenate([(g - g.mean()).ravel(), (d - d.mean()).ravel()])
    n = np.linalg.norm(v)
    if n < 1e-12:
        return np.zeros(DESCRIPTOR_DIM)
    return v / n


@dataclass
class DescriptorRecord:
    keyframe_id: int
    submap_id: int
    vector: np.ndarray  # (512,) float32


@dataclass
class LoopCandidate:
    query_frame_id: int
    matched_keyframe_id: int
    matched_submap_id: int
    score: float
    geometry_verified: bool = False
    hit_fraction: float = 0.0


class DescriptorIndex:
    """Flat keyframe descriptor database spanning all sub-maps."""

    MAGIC = b"VXDI"
    _REC = struct.Struct(f"<II{DESCRIPTOR_DIM}f")

    def __init__(self):
        self.records: List[DescriptorRecord] = []

    def __len__(self) -> int:
        return len(self.records)

    def add(self, keyframe_id: int, submap_id: int, vector: np.ndarray) -> None:
        v = np.asarray(vector, dtype=np.float32).reshape(DESCRIPTOR_DIM)
        self.records.append(DescriptorRecord(int(keyframe_id), int(submap_id), v))

    def query(self, vector: np.ndarray, exclude_submap: int
              ) -> Tuple[Optional[DescriptorRecord], float]:
        """Best cosine match outside ``exclude_submap``; (None, -1) if empty."""
        cands = [r for r in self.records if r.submap_id != exclude_submap]
        if not cands:
            return None, -1.0
        mat = np.stack([r.vector for r in cands]).astype(np.float64)
        scores = mat @ np.asarray(vector, dtype=np.float64)
        best = int(np.argmax(scores))
        return cands[best], float(scores[best])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<I", len(self.records)))
            for r in self.records:
                fh.write(self._REC.pack(r.keyframe_id, r.submap_id,
                                        *r.vector.tolist()))

    @classmethod
    def load(cls, path) -> "DescriptorIndex":
        idx = cls()
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != cls.MAGIC:
            raise ValueError(f"{path}: not a descriptor index file")
        (count,) = struct.unpack_from("<I", blob, 4)
        off = 8
        for _ in range(count):
            vals = cls._REC.unpack_from(blob, off)
            off += cls._REC.size
            idx.add(vals[0], vals[1], np.array(vals[2:], dtype=np.float32))
        return idx


def target_frame_pose(tar_map_pose: Pose, src_map_pose: Pose,
                      src_cam_pose: Pose) -> Pose:
    """Camera pose expressed in the target map's frame.

    Chains the source camera out to world through its own map pose and
    back into the target map: (T_tar^m)^-1 * T_src^m * T_src^c.
    """
    return geometry.compose(
        geometry.inverse(tar_map_pose),
        geometry.compose(src_map_pose, src_cam_pose),
    )


def geometry_hit_fraction(grid, pose_in_map: Pose, intr: Intrinsics,
                          cfg, rng) -> float:
    """Fraction of random pixel rays from the pose that touch allocated voxels."""
    us = rng.integers(0, intr.width, size=cfg.geo_rays).astype(np.float64)
    vs = rng.integers(0, intr.height, size=cfg.geo_rays).astype(np.float64)
    origins, dirs, _ = geometry.pixel_rays(us, vs, intr, pose_in_map)
    t_near = np.zeros(origins.shape[0])
    t_far = np.full(origins.shape[0], cfg.depth_max)
    _, _, counts, _ = grid.ray_hits(origins, dirs, t_near, t_far, cfg.max_hits)
    return float(np.mean(counts > 0))


def detect_loop(query_kf: Keyframe, active_submap_id: int,
                index: DescriptorIndex, submaps: Dict[int, SubMap],
                active_map_pose: Pose, intr: Intrinsics, cfg, rng
                ) -> Optional[LoopCandidate]:
    """Appearance + geometry loop check for a freshly inserted keyframe.

    Returns the best verified candidate into a non-active sub-map, or
    None when similarity or ray coverage falls short.
    """
    if query_kf.descriptor is None:
        query_kf.descriptor = compute_descriptor(query_kf.rgb, query_kf.depth)
    record, score = index.query(query_kf.descriptor, active_submap_id)
    if record is None or score <= cfg.theta_sim:
        return None
    target = submaps[record.submap_id]
    pose_in_target = target_frame_pose(target.pose_world, active_map_pose,
                                       query_kf.pose)
    frac = geometry_hit_fraction(target.grid, pose_in_target, intr, cfg, rng)
    cand = LoopCandidate(query_kf.frame_id, record.keyframe_id,
                         record.submap_id, score,
                         geometry_verified=frac >= cfg.rho_geo,
                         hit_fraction=frac)
    if not cand.geometry_verified:
        return None
    return cand


@dataclass
class InterMapResult:
    iterations: int
    first_loss: float
    final_loss: float
    src_map_pose: Pose = None
    query_pose: Pose = None


def inter_map_optimize(src_map: SubMap, query_kf: Keyframe, tar_map: SubMap,
                       intr: Intrinsics, cfg, rng) -> InterMapResult:
    """Align the source sub-map against the matched target map.

    The query keyframe is rendered inside the target map through the
    chained pose, and the rendering losses drive updates of the source
    map's world pose and the query keyframe's in-map pose only; the
    target map and its field stay untouched.  Ten consecutive loss
    increases abandon the attempt: entry poses are restored and
    :class:`OptimizationDiverged` is raised.
    """
    entry_map_pose = src_map.pose_world.copy()
    entry_kf_pose = query_kf.pose.copy()
    grid, decoder = tar_map.grid, tar_map.decoder
    adam = Adam(cfg.lr_pose_inter)
    scratch = np.zeros_like(grid.embedding_grads)
    mask = valid_depth_mask(query_kf.depth, cfg.depth_max)
    # the anchor keyframe defines the source map's gauge; when it is the
    # query, the whole correction must go to the map pose
    move_kf = query_kf is not src_map.anchor

    prev_loss = np.inf
    streak = 0
    first_loss = float("nan")
    loss = float("nan")
    iterations = 0
    for it in range(int(cfg.loop_inter_iters)):
        bridge = geometry.compose(geometry.inverse(tar_map.pose_world),
                                  src_map.pose_world)
        pose_in_target = geometry.compose(bridge, query_kf.pose)

        us, vs = sample_pixel_batch(rng, mask, cfg.map_rays)
        if us.shape[0] == 0:
            break
        origins, dirs, scale = geometry.pixel_rays(us, vs, intr, pose_in_target)
        ui, vi = us.astype(np.int64), vs.astype(np.int64)
        gt_depth = query_kf.depth[vi, ui] * scale
        gt_color = query_kf.rgb[vi, ui].astype(np.float64)
        try:
            batch = sample_rays(grid, origins, dirs, gt_color, gt_depth,
                                step=cfg.step, tr=cfg.tr,
                                max_hits=cfg.max_hits,
                                max_distance=cfg.depth_max,
                                drop_behind=True)
        except NoSamples:
            break
        decoder.zero_grads()
        scratch[...] = 0.0
        ctx = render_batch(batch, grid.embeddings, decoder, cfg.tr,
                           grid.voxel_size, lambdas=cfg.lambdas)
        loss = ctx.losses.total
        if it == 0:
            first_loss = loss
        dpos = ctx.backward(scratch)
        iterations = it + 1

        if loss > prev_loss:
            streak += 1
            if streak >= DIVERGENCE_PATIENCE:
                src_map.pose_world = entry_map_pose
                query_kf.pose = entry_kf_pose
                raise OptimizationDiverged(
                    f"loop alignment loss rose {streak} iterations in a row "
                    f"({prev_loss:.5f} -> {loss:.5f})"
                )
        else:
            streak = 0
        prev_loss = loss

        # world-frame twist on the source map pose
        p_tar = batch.positions
        p_world = p_tar @ tar_map.pose_world.rotation.T + tar_map.pose_world.translation
        g_world = dpos @ tar_map.pose_world.rotation.T
        xi_m = np.zeros(6)
        adam.step("xi_m", xi_m, geometry.twist_gradient(p_world, g_world))

        src_map.pose_world = geometry.compose(geometry.exp_se3(xi_m),
                                              src_map.pose_world)
        if move_kf:
            # source-map-frame twist on the query keyframe pose
            inv_bridge = geometry.inverse(bridge)
            p_src = p_tar @ inv_bridge.rotation.T + inv_bridge.translation
            g_src = dpos @ bridge.rotation
            xi_c = np.zeros(6)
            adam.step("xi_c", xi_c, geometry.twist_gradient(p_src, g_src))
            query_kf.pose = geometry.compose(geometry.exp_se3(xi_c),
                                             query_kf.pose)

    return InterMapResult(iterations, first_loss, loss,
                          src_map.pose_world, query_kf.pose)


def intra_map_optimize(submap: SubMap, intr: Intrinsics, cfg, rng,
                       iterations: Optional[int] = None) -> int:
    """Bundle adjustment over all keyframes of one sub-map.

    The first keyframe stays fixed as the gauge anchor.  Active maps
    also fine-tune embeddings and decoder at reduced rates; frozen maps
    only move poses.  Sub-maps with fewer than two keyframes are left
    alone.  Returns the number of iterations performed.
    """
    kfs = submap.keyframes
    if len(kfs) < 2:
        return 0
    iters = int(cfg.loop_intra_iters if iterations is None else iterations)
    refine_field = not submap.frozen
    grid, decoder = submap.grid, submap.decoder
    pose_adam = Adam(cfg.lr_pose_intra)
    emb_adam = Adam(cfg.lr_intra_embeddings)
    dec_adam = Adam(cfg.lr_intra_decoder)
    scratch = np.zeros_like(grid.embedding_grads)
    anchor = submap.anchor

    done = 0
    for _ in range(iters):
        parts = [frame_pixel_rays(rng, intr, cfg, kf.rgb, kf.depth, kf.pose)
                 for kf in kfs]
        origins = np.concatenate([p[0] for p in parts])
        dirs = np.concatenate([p[1] for p in parts])
        gt_color = np.concatenate([p[2] for p in parts])
        gt_depth = np.concatenate([p[3] for p in parts])
        frame_index = np.repeat(np.arange(len(kfs)), cfg.map_rays)
        try:
            batch = sample_rays(grid, origins, dirs, gt_color, gt_depth,
                                step=cfg.step, tr=cfg.tr,
                                max_hits=cfg.max_hits,
                                max_distance=cfg.depth_max,
                                frame_index=frame_index,
                                drop_behind=True)
        except NoSamples:
            break
        decoder.zero_grads()
        table = grid.embedding_grads if refine_field else scratch
        table[...] = 0.0
        ctx = render_batch(batch, grid.embeddings, decoder, cfg.tr,
                           grid.voxel_size, lambdas=cfg.lambdas)
        ctx.backward(table)
        twists = ctx.pose_twist_grads()
        if refine_field:
            emb_adam.step("emb", grid.embeddings, grid.embedding_grads)
            dec_adam.step_params(decoder.params, decoder.grads)
        for g, kf in enumerate(kfs):
            if kf is anchor:
                continue
            xi = np.zeros(6)
            pose_adam.step(f"kf{kf.frame_id}", xi, twists[g])
            kf.pose = geometry.compose(geometry.exp_se3(xi), kf.pose)
        done += 1
    if done:
        submap.bump_version()
    return done


def merge_agent_maps(maps_a: List[SubMap], maps_b: List[SubMap],
                     kf_a: Keyframe, map_a: SubMap,
                     kf_b: Keyframe, map_b: SubMap,
                     intr: Intrinsics, cfg, rng) -> List[SubMap]:
    """Fold agent B's sub-maps into agent A's world frame.

    The matched keyframe pair is first forced to coincide: every B
    sub-map pose is left-multiplied by the world transform G that maps
    B's keyframe onto A's.  The matched pair is then refined with the
    usual inter-map alignment (B's map as source, A's as target)
    followed by per-map bundle adjustment on both.  Returns the unified
    list with B's sub-map ids renumbered after A's.
    """
    entry_poses = [sm.pose_world.copy() for sm in maps_b]
    entry_ids = [sm.id for sm in maps_b]
    world_a = geometry.compose(map_a.pose_world, kf_a.pose)
    world_b = geometry.compose(map_b.pose_world, kf_b.pose)
    G = geometry.compose(world_a, geometry.inverse(world_b))
    for sm in maps_b:
        sm.pose_world = geometry.compose(G, sm.pose_world)

    next_id = max((sm.id for sm in maps_a), default=-1) + 1
    for i, sm in enumerate(maps_b):
        sm.id = next_id + i

    try:
        inter_map_optimize(map_b, kf_b, map_a, intr, cfg, rng)
    except OptimizationDiverged:
        for sm, pose, old_id in zip(maps_b, entry_poses, entry_ids):
            sm.pose_world = pose
            sm.id = old_id
        raise
    intra_map_optimize(map_a, intr, cfg, rng)
    intra_map_optimize(map_b, intr, cfg, rng)
    return list(maps_a) + list(maps_b)
