"""Kernel backend selection.

The compiled extension is used when importable; otherwise the pure
numpy fallback takes over.  Set ``VOXSLAM_BACKEND=fallback`` or
``=compiled`` to force a choice (forcing ``compiled`` raises if the
extension is missing).  Both expose the same two functions with
bitwise-matching results.
"""

import os

from . import fallback as _fallback

_requested = os.environ.get("VOXSLAM_BACKEND", "").strip().lower()

if _requested == "fallback":
    _impl = _fallback
    BACKEND = "fallback"
elif _requested in ("", "compiled"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _fallback
        BACKEND = "fallback"
else:
    raise ValueError(
        f"VOXSLAM_BACKEND must be 'compiled' or 'fallback', got {_requested!r}"
    )

ray_voxel_hits = _impl.ray_voxel_hits
scatter_add = _impl.scatter_add

__all__ = ["BACKEND", "ray_voxel_hits", "scatter_add", "fallback"]
