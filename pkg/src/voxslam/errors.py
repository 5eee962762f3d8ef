"""Exception types shared across the package."""


class VoxslamError(Exception):
    """Base class for all package-specific errors."""


class AngleNearPi(VoxslamError):
    """Rotation angle too close to pi for a stable logarithm."""


class InvalidDepth(VoxslamError):
    """Depth value is zero, negative or non-finite."""


class CoordOutOfRange(VoxslamError):
    """Integer voxel coordinate outside the addressable range."""


class MapExtentExceeded(VoxslamError):
    """A point falls outside the octree root extent of the active map."""


class PointNotInMap(VoxslamError):
    """Query point does not lie inside any allocated voxel."""


class NoSamples(VoxslamError):
    """Every ray in a batch missed the allocated voxels."""


class TapeReplayed(VoxslamError):
    """backward() invoked twice on the same gradient tape."""


class EmptyBatch(VoxslamError):
    """Loss evaluation requested on an empty ray batch."""


class TrackingLost(VoxslamError):
    """Tracker could not localize the frame against the active map."""

    def __init__(self, message, hit_fraction=None, depth_residual=None):
        super().__init__(message)
        self.hit_fraction = hit_fraction
        self.depth_residual = depth_residual


class EmptyWindow(VoxslamError):
    """Bundle adjustment invoked with no frames in the window."""


class OptimizationDiverged(VoxslamError):
    """Loss increased for too many consecutive iterations."""


class EmptyMap(VoxslamError):
    """Mesh extraction requested on a map with no allocated voxels."""


class CameraInsideGeometry(VoxslamError):
    """Scripted camera pose intersects solid scene geometry."""


class NoAssociations(VoxslamError):
    """No timestamp associations found between two trajectories."""


class EmptyMesh(VoxslamError):
    """Mesh metric requested on a mesh without faces."""


class MalformedDataset(VoxslamError):
    """Dataset directory does not match the expected layout."""

    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = path


class ConfigError(VoxslamError):
    """Invalid run configuration value."""
