"""Run orchestration: tracking, mapping, and loop closing over a dataset.

The deterministic mode processes every frame synchronously: track against
the active sub-map, fuse into it, then handle loop closure when a
keyframe was inserted.  The threaded mode runs the same three roles as
separate workers connected by queues; the tracker consumes published map
snapshots, the mapper owns all map mutation, and the loop worker corrects
poses under a shared lock.

Frame poses are stored in their sub-map's frame.  World poses are
composed with the owning sub-map's world pose at read time, so loop
corrections applied to a map pose retroactively move every frame that
was tracked inside that map.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import geometry, loop
from .config import RunConfig
from .decoder import Decoder
from .errors import MapExtentExceeded, OptimizationDiverged, TrackingLost
from .grid import VoxelGrid
from .mapper import Mapper
from .submap import SubMap
from .tracker import track_frame


@dataclass
class FrameRecord:
    """Per-frame outcome; pose is camera-to-map of the owning sub-map."""

    index: int
    timestamp: float
    submap_id: int
    pose_map: geometry.Pose
    tracked: bool                 # False for bootstrap / post-rollover frames
    keyframe: bool
    n_created: int = 0
    n_observed: int = 0
    loss: float = float("nan")
    hit_fraction: float = float("nan")

    def to_json(self) -> dict:
        return {
            "frame": self.index,
            "timestamp": self.timestamp,
            "submap": self.submap_id,
            "tracked": self.tracked,
            "keyframe": self.keyframe,
            "n_created": self.n_created,
            "n_observed": self.n_observed,
            "loss": None if np.isnan(self.loss) else round(self.loss, 6),
            "hit_fraction": None if np.isnan(self.hit_fraction)
            else round(self.hit_fraction, 4),
        }


@dataclass
class RunSummary:
    records: List[FrameRecord]
    loop_events: List[dict]
    submaps: List[SubMap]
    elapsed: float

    def world_poses(self) -> List[geometry.Pose]:
        by_id = {m.id: m for m in self.submaps}
        return [geometry.compose(by_id[r.submap_id].pose_world, r.pose_map)
                for r in self.records]

    def timestamps(self) -> np.ndarray:
        return np.array([r.timestamp for r in self.records])


class SlamPipeline:
    """Multi-sub-map SLAM over an RGB-D frame stream."""

    def __init__(self, intrinsics, cfg: RunConfig, first_pose: geometry.Pose = None):
        self.intr = intrinsics
        self.cfg = cfg
        self.submaps: List[SubMap] = []
        self.mapper: Optional[Mapper] = None
        self.records: List[FrameRecord] = []
        self.loop_events: List[dict] = []
        self.index = loop.DescriptorIndex()
        self._first_pose = (first_pose.copy() if first_pose is not None
                            else geometry.Pose.identity())
        self._last_pose_world = self._first_pose.copy()
        seed = int(cfg.seed)
        self.rng_track = np.random.default_rng(seed)
        self.rng_map = np.random.default_rng(seed + 1)
        self.rng_loop = np.random.default_rng(seed + 2)
        self._forced = set(int(i) for i in cfg.force_rollover_frames)
        self._kf_since_snapshot = 0
        self.snapshot_hook = None   # called with the active SubMap
        self._lock = threading.Lock()

    # ------------------------------------------------------------------
    # sub-map lifecycle

    @property
    def active(self) -> Optional[SubMap]:
        return self.submaps[-1] if self.submaps else None

    def _fresh_submap(self, submap_id: int, pose_world: geometry.Pose) -> SubMap:
        cfg = self.cfg
        grid = VoxelGrid(k=cfg.k, voxel_size=cfg.voxel_size,
                         embedding_dim=cfg.embedding_dim, rng=self.rng_map)
        dec = Decoder(embedding_dim=cfg.embedding_dim, hidden=cfg.hidden,
                      trunk_layers=cfg.trunk_layers,
                      color_hidden=cfg.color_hidden, rng=self.rng_map)
        return SubMap(submap_id, grid, dec, pose_world=pose_world)

    def _start_first_submap(self):
        sm = self._fresh_submap(0, geometry.Pose.identity())
        self.submaps.append(sm)
        self.mapper = Mapper(sm, self.intr, self.cfg, self.rng_map)

    def rollover(self, camera_world: geometry.Pose) -> SubMap:
        """Freeze the active sub-map and open a new one at the camera.

        The new map's origin sits at the camera position rounded to the
        voxel grid, so composing the new map pose with the camera's
        in-map pose reproduces its world pose exactly.
        """
        cfg = self.cfg
        if self.active is not None:
            self.active.freeze()
        origin = np.round(camera_world.translation / cfg.voxel_size) * cfg.voxel_size
        pose_world = geometry.Pose(np.eye(3), origin)
        sm = self._fresh_submap(len(self.submaps), pose_world)
        self.submaps.append(sm)
        self.mapper = Mapper(sm, self.intr, self.cfg, self.rng_map)
        return sm

    def _drifted(self, pose_world: geometry.Pose) -> geometry.Pose:
        """Pose estimate corrupted by the configured odometric drift.

        Applied to the believed camera pose at forced rollovers, so the
        new sub-map inherits a wrong world position that only loop
        closure against older maps can correct.
        """
        offset = np.asarray(self.cfg.drift_translation, dtype=np.float64)
        return geometry.Pose(pose_world.rotation,
                             pose_world.translation + offset)

    def _world_to_map(self, pose_world: geometry.Pose) -> geometry.Pose:
        return geometry.compose(geometry.inverse(self.active.pose_world),
                                pose_world)

    def _map_to_world(self, pose_map: geometry.Pose) -> geometry.Pose:
        return geometry.compose(self.active.pose_world, pose_map)

    # ------------------------------------------------------------------
    # per-frame step (deterministic path)

    def process_frame(self, frame) -> FrameRecord:
        cfg = self.cfg
        with self._lock:
            if self.active is None:
                self._start_first_submap()
                return self._bootstrap_frame(frame, self._first_pose)
            if frame.index in self._forced:
                believed = self._drifted(self._last_pose_world)
                self.rollover(believed)
                return self._bootstrap_frame(frame, believed)

        prev_map = self._world_to_map(self._last_pose_world)
        try:
            result = track_frame(frame, self.active.grid, self.active.decoder,
                                 prev_map, self.intr, cfg, self.rng_track)
        except TrackingLost:
            with self._lock:
                self.rollover(self._last_pose_world)
                return self._bootstrap_frame(frame, self._last_pose_world)

        with self._lock:
            try:
                return self._fuse_tracked(frame, result)
            except MapExtentExceeded:
                pose_world = self._map_to_world(result.pose)
                self.rollover(pose_world)
                return self._bootstrap_frame(frame, pose_world)

    def _bootstrap_frame(self, frame, pose_world: geometry.Pose) -> FrameRecord:
        """First frame of a sub-map: known pose, long optimization."""
        pose_map = self._world_to_map(pose_world)
        fuse = self.mapper.fuse_frame(frame, pose_map,
                                      ba_iters=self.cfg.first_frame_iters)
        rec = FrameRecord(frame.index, frame.timestamp, self.active.id,
                          fuse.pose.copy(), tracked=False,
                          keyframe=fuse.keyframe_inserted,
                          n_created=fuse.n_created, n_observed=fuse.n_observed,
                          loss=fuse.final_loss)
        self._finish_frame(rec, fuse)
        return rec

    def _fuse_tracked(self, frame, tracked) -> FrameRecord:
        fuse = self.mapper.fuse_frame(frame, tracked.pose)
        rec = FrameRecord(frame.index, frame.timestamp, self.active.id,
                          fuse.pose.copy(), tracked=True,
                          keyframe=fuse.keyframe_inserted,
                          n_created=fuse.n_created, n_observed=fuse.n_observed,
                          loss=fuse.final_loss,
                          hit_fraction=tracked.hit_fraction)
        self._finish_frame(rec, fuse)
        return rec

    def _finish_frame(self, rec: FrameRecord, fuse):
        self.records.append(rec)
        self._last_pose_world = self._map_to_world(fuse.pose)
        if rec.keyframe:
            kf = self.active.keyframes[-1]
            if self.cfg.loop_enabled:
                self._handle_loop(kf)
            if kf.descriptor is None:
                kf.descriptor = loop.compute_descriptor(kf.rgb, kf.depth)
            self.index.add(kf.frame_id, self.active.id, kf.descriptor)
            self._kf_since_snapshot += 1
            if (self.cfg.snapshot_every > 0 and self.snapshot_hook is not None
                    and self._kf_since_snapshot >= self.cfg.snapshot_every):
                self._kf_since_snapshot = 0
                self.snapshot_hook(self.active)

    # ------------------------------------------------------------------
    # loop closure

    def _handle_loop(self, kf):
        by_id = {m.id: m for m in self.submaps}
        cand = loop.detect_loop(kf, self.active.id, self.index, by_id,
                                self.active.pose_world, self.intr, self.cfg,
                                self.rng_loop)
        if cand is None:
            return
        target = by_id[cand.matched_submap_id]
        event = {
            "frame": int(kf.frame_id),
            "submap": int(self.active.id),
            "matched_keyframe": int(cand.matched_keyframe_id),
            "matched_submap": int(cand.matched_submap_id),
            "score": round(float(cand.score), 6),
            "hit_fraction": round(float(cand.hit_fraction), 4),
            "accepted": False,
        }
        try:
            loop.inter_map_optimize(self.active, kf, target, self.intr,
                                    self.cfg, self.rng_loop)
            loop.intra_map_optimize(self.active, self.intr, self.cfg,
                                    self.rng_loop)
            event["accepted"] = True
            self._last_pose_world = geometry.compose(self.active.pose_world,
                                                     kf.pose)
        except OptimizationDiverged:
            pass
        self.loop_events.append(event)

    # ------------------------------------------------------------------
    # drivers

    def run(self, frames, max_frames: int = 0) -> RunSummary:
        """Deterministic synchronous drive over a frame iterable."""
        t0 = time.time()
        for i, frame in enumerate(frames):
            if max_frames and i >= max_frames:
                break
            self.process_frame(frame)
        return RunSummary(self.records, self.loop_events, self.submaps,
                          time.time() - t0)

    def run_threaded(self, frames, max_frames: int = 0) -> RunSummary:
        """Tracker, mapper, and loop roles on separate threads.

        The tracker consumes map snapshots published after every fuse;
        the mapper is the only map writer; loop closure waits for the
        map lock.  Output records match the synchronous schedule's
        structure but not its exact values (no determinism guarantee).
        """
        t0 = time.time()
        track_q: queue.Queue = queue.Queue(maxsize=4)
        fuse_q: queue.Queue = queue.Queue(maxsize=4)
        kf_q: queue.Queue = queue.Queue()
        published = {}
        pub_lock = threading.Lock()
        stop = object()

        def publish():
            with pub_lock:
                published["snap"] = self.active.snapshot()

        def tracker_role():
            while True:
                item = track_q.get()
                if item is stop:
                    fuse_q.put(stop)
                    return
                frame = item
                with pub_lock:
                    snap = published.get("snap")
                if snap is None:
                    fuse_q.put((frame, None))
                    continue
                prev = geometry.compose(geometry.inverse(snap.pose_world),
                                        self._last_pose_world)
                try:
                    res = track_frame(frame, snap.grid, snap.decoder, prev,
                                      self.intr, self.cfg, self.rng_track)
                    fuse_q.put((frame, res))
                except TrackingLost:
                    fuse_q.put((frame, None))

        def mapper_role():
            while True:
                item = fuse_q.get()
                if item is stop:
                    kf_q.put(stop)
                    return
                frame, res = item
                with self._lock:
                    if self.active is None:
                        self._start_first_submap()
                        bootstrap_threaded(frame, self._first_pose)
                    elif res is None or frame.index in self._forced:
                        believed = self._last_pose_world
                        if frame.index in self._forced:
                            believed = self._drifted(believed)
                        self.rollover(believed)
                        bootstrap_threaded(frame, believed)
                    else:
                        try:
                            fuse_tracked_threaded(frame, res)
                        except MapExtentExceeded:
                            pose_world = self._map_to_world(res.pose)
                            self.rollover(pose_world)
                            bootstrap_threaded(frame, pose_world)
                    publish()

        def loop_role():
            while True:
                item = kf_q.get()
                if item is stop:
                    return
                with self._lock:
                    self._handle_loop(item)

        # same code paths as the synchronous mode, with loop handling
        # deferred to the loop worker through kf_q
        def finish(rec):
            self.records.append(rec)
            self._last_pose_world = geometry.compose(
                self.active.pose_world, rec.pose_map)
            if rec.keyframe:
                kf = self.active.keyframes[-1]
                if kf.descriptor is None:
                    kf.descriptor = loop.compute_descriptor(kf.rgb, kf.depth)
                self.index.add(kf.frame_id, self.active.id, kf.descriptor)
                if self.cfg.loop_enabled:
                    kf_q.put(kf)

        def bootstrap_threaded(frame, pose_world):
            pose_map = self._world_to_map(pose_world)
            fuse = self.mapper.fuse_frame(frame, pose_map,
                                          ba_iters=self.cfg.first_frame_iters)
            finish(FrameRecord(frame.index, frame.timestamp, self.active.id,
                               fuse.pose.copy(), tracked=False,
                               keyframe=fuse.keyframe_inserted,
                               n_created=fuse.n_created,
                               n_observed=fuse.n_observed,
                               loss=fuse.final_loss))

        def fuse_tracked_threaded(frame, tracked):
            fuse = self.mapper.fuse_frame(frame, tracked.pose)
            finish(FrameRecord(frame.index, frame.timestamp, self.active.id,
                               fuse.pose.copy(), tracked=True,
                               keyframe=fuse.keyframe_inserted,
                               n_created=fuse.n_created,
                               n_observed=fuse.n_observed,
                               loss=fuse.final_loss,
                               hit_fraction=tracked.hit_fraction))

        workers = [threading.Thread(target=f, name=n) for f, n in
                   [(tracker_role, "tracker"), (mapper_role, "mapper"),
                    (loop_role, "loop")]]
        for w in workers:
            w.start()
        for i, frame in enumerate(frames):
            if max_frames and i >= max_frames:
                break
            track_q.put(frame)
        track_q.put(stop)
        for w in workers:
            w.join()
        return RunSummary(self.records, self.loop_events, self.submaps,
                          time.time() - t0)


# ----------------------------------------------------------------------
# run directory output


def write_run_outputs(out_dir, summary: RunSummary, cfg: RunConfig,
                      index: loop.DescriptorIndex = None):
    """Persist trajectory, logs, config, and sub-map containers."""
    import os

    from .dataset import write_trajectory

    os.makedirs(out_dir, exist_ok=True)
    poses = summary.world_poses()
    stamps = summary.timestamps()
    write_trajectory(os.path.join(out_dir, "trajectory.txt"), stamps, poses)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    with open(os.path.join(out_dir, "frames.jsonl"), "w", encoding="utf-8") as fh:
        for rec in summary.records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "loop_events.jsonl"), "w",
              encoding="utf-8") as fh:
        for ev in summary.loop_events:
            fh.write(json.dumps(ev, sort_keys=True) + "\n")
    maps_dir = os.path.join(out_dir, "maps")
    os.makedirs(maps_dir, exist_ok=True)
    for sm in summary.submaps:
        sm.save(os.path.join(maps_dir, f"submap_{sm.id:03d}.vxm"))
    if index is not None:
        index.save(os.path.join(out_dir, "descriptors.vxdi"))


def load_run_submaps(run_dir) -> List[SubMap]:
    import glob
    import os

    paths = sorted(glob.glob(os.path.join(run_dir, "maps", "submap_*.vxm")))
    return [SubMap.load(p) for p in paths]
