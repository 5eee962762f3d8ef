"""Dense RGB-D SLAM on a sparse voxel feature grid.

Camera tracking and map reconstruction share one scene representation:
learnable feature vectors at voxel corners, decoded by a small MLP into
color and signed distance, optimized through a differentiable renderer.
"""

from .config import RunConfig, load_config, parse_config_text
from .dataset import Frame, RGBDDataset, read_trajectory, write_trajectory
from .decoder import Decoder
from .geometry import Intrinsics, Pose
from .grid import RaySampleBatch, VoxelGrid, sample_rays
from .mapper import Keyframe, KeyframePolicy, Mapper
from .meshing import Mesh, extract_mesh, merge_meshes, read_ply, write_ply
from .metrics import (absolute_trajectory_error, mesh_metrics,
                      observed_surface_points, point_set_metrics)
from .pipeline import (RunSummary, SlamPipeline, load_run_submaps,
                       write_run_outputs)
from .render import render_batch, render_pixels
from .submap import MapSnapshot, SubMap
from .synth import (Box, RoomShell, SceneSpec, Sphere, generate_sequence,
                    make_gt_mesh, scene_sdf)
from .tracker import TrackingResult, track_frame

__version__ = "0.1.0"

__all__ = [
    "Box", "Decoder", "Frame", "Intrinsics", "Keyframe", "KeyframePolicy",
    "MapSnapshot", "Mapper", "Mesh", "Pose", "RGBDDataset", "RaySampleBatch",
    "RoomShell", "RunConfig", "RunSummary", "SceneSpec", "SlamPipeline",
    "Sphere", "SubMap", "TrackingResult", "VoxelGrid",
    "absolute_trajectory_error", "extract_mesh", "generate_sequence",
    "load_config", "load_run_submaps", "make_gt_mesh", "merge_meshes",
    "mesh_metrics", "observed_surface_points", "parse_config_text",
    "point_set_metrics", "read_ply", "read_trajectory", "render_batch",
    "render_pixels", "sample_rays", "scene_sdf", "track_frame",
    "write_ply", "write_run_outputs", "write_trajectory",
]
