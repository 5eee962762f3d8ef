"""Run configuration: every tunable in one flat, serializable record.

Config files are plain text, one ``key = value`` per line, ``#`` starts
a comment.  Unknown keys and malformed values are hard errors with line
numbers.  The same record round-trips into the run output directory so
a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError


@dataclass
class RunConfig:
    # map structure
    k: int = 6                      # grid is 2^k voxels per axis
    voxel_size: float = 0.2        # m
    embedding_dim: int = 16
    max_hits: int = 64             # voxels collected per ray
    depth_max: float = 8.0         # m, sampling distance cap

    # decoder
    trunk_layers: int = 2          # 2..4
    hidden: int = 128
    color_hidden: int = 256

    # rendering / losses
    tr: float = 0.05               # truncation distance, m
    step_ratio: float = 0.1        # sample step = step_ratio * voxel_size
    lambda_rgb: float = 10.0
    lambda_depth: float = 1.0
    lambda_fs: float = 10.0
    lambda_sdf: float = 100.0

    # tracking
    track_pixels: int = 1024
    track_iters: int = 20
    lr_pose_track: float = 1e-3
    track_lr_decay: float = 1.0    # pose lr factor for the second half of the iterations
    track_conv_tol: float = 1e-5
    min_hit_fraction: float = 0.05
    lost_depth_threshold: float = 0.10

    # mapping
    tau_kf: float = 0.2            # keyframe ratio threshold
    kf_interval: int = 30          # max frames between keyframes
    window_size: int = 5           # random past keyframes per BA window
    map_rays: int = 2048           # rays per frame per BA iteration
    ba_iters: int = 30             # BA iterations per fused frame
    first_frame_iters: int = 100   # extra iterations on the first frame
    lr_embeddings: float = 5e-3
    lr_decoder: float = 1e-3
    lr_pose_ba: float = 5e-4
    ba_refine_current: bool = True  # let BA also step the non-keyframe current pose

    # loop closing / multi-map
    loop_enabled: bool = True
    theta_sim: float = 0.8         # descriptor cosine threshold
    rho_geo: float = 0.5           # required hit fraction of test rays
    geo_rays: int = 256
    loop_inter_iters: int = 100
    loop_intra_iters: int = 50
    lr_pose_inter: float = 1e-3
    lr_pose_intra: float = 2e-4
    lr_intra_embeddings: float = 5e-4
    lr_intra_decoder: float = 1e-4

    # meshing
    samples_per_voxel_axis: int = 4

    # runtime
    seed: int = 0
    deterministic: bool = True
    max_frames: int = 0            # 0 = whole dataset
    snapshot_every: int = 0        # keyframes between periodic snapshots; 0 = final only

    # diagnostic hooks (scenario construction for tests/benchmarks)
    force_rollover_frames: tuple = ()      # frame ids that force a new sub-map
    drift_translation: tuple = (0.0, 0.0, 0.0)  # pose-estimate error injected at forced rollovers

    @property
    def step(self) -> float:
        return self.step_ratio * self.voxel_size

    @property
    def half_extent(self) -> float:
        return 0.5 * (1 << self.k) * self.voxel_size

    @property
    def lambdas(self) -> dict:
        return {
            "rgb": self.lambda_rgb,
            "depth": self.lambda_depth,
            "fs": self.lambda_fs,
            "sdf": self.lambda_sdf,
        }

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def validated(self) -> "RunConfig":
        validate(self)
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DEFAULTS = RunConfig()


def _parse_value(name: str, text: str, lineno: int):
    default = getattr(_DEFAULTS, name)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            parts = [p.strip() for p in text.split(",") if p.strip()]
            elem = float if name == "drift_translation" else int
            return tuple(elem(p) for p in parts)
        return text
    except ValueError as e:
        raise ConfigError(f"line {lineno}: bad value for {name}: {e}") from None


def parse_config_text(text: str, base: RunConfig = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(key, value, lineno))
    validate(cfg)
    return cfg


def load_config(path, base: RunConfig = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base=base)


def validate(cfg: RunConfig):
    def positive(name):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{name} must be positive")

    for name in (
        "voxel_size", "tr", "step_ratio", "depth_max", "lr_embeddings",
        "lr_decoder", "lr_pose_track", "lr_pose_ba", "lr_pose_inter",
        "lr_pose_intra", "track_pixels", "map_rays", "max_hits",
        "embedding_dim", "kf_interval", "window_size", "geo_rays",
        "samples_per_voxel_axis",
    ):
        positive(name)
    if not 1 <= cfg.k <= 8:
        raise ConfigError("k must be in [1, 8]")
    if not 2 <= cfg.trunk_layers <= 4:
        raise ConfigError("trunk_layers must be in [2, 4]")
    if not 0 < cfg.tau_kf:
        raise ConfigError("tau_kf must be positive")
    if not 0.0 < cfg.track_lr_decay <= 1.0:
        raise ConfigError("track_lr_decay must be in (0, 1]")
    if not -1.0 <= cfg.theta_sim <= 1.0:
        raise ConfigError("theta_sim must be in [-1, 1]")
    if not 0.0 < cfg.rho_geo <= 1.0:
        raise ConfigError("rho_geo must be in (0, 1]")
    for name in ("track_iters", "ba_iters", "first_frame_iters",
                 "loop_inter_iters", "loop_intra_iters", "max_frames",
                 "snapshot_every", "seed"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0")
    # rays sampled out to depth_max must stay inside a map anchored at
    # the camera, or every frame would overflow the extent
    if cfg.depth_max >= cfg.half_extent:
        raise ConfigError(
            f"depth_max ({cfg.depth_max}) must be smaller than half the map "
            f"extent ({cfg.half_extent}); raise k or shrink depth_max"
        )
    if len(cfg.drift_translation) != 3:
        raise ConfigError("drift_translation needs exactly 3 components")
