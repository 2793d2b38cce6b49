"""cdrecon: joint sparse-TSDF reconstruction and 3D semantic labeling from posed RGB video.

The pipeline consumes a stream of posed monocular frames, groups key frames
into fixed-size fragments, lifts 2D image features into coarse-to-fine sparse
voxel volumes fused by a recurrent unit, refines occupancy and semantics with
explicit depth / 2D-semantics priors, and extracts a labeled triangle mesh.

Everything trainable runs on a small reverse-mode autodiff runtime
(`cdrecon.autodiff` for dense tensors, `cdrecon.sparse3d` for coordinate-sparse
voxel tensors); no external ML framework is involved.
"""

__version__ = "0.1.0"

from cdrecon.errors import (
    CheckFailedError,
    DataError,
    EmptyFragmentError,
    EmptyMeshError,
    InvalidArgumentError,
)

__all__ = [
    "InvalidArgumentError",
    "DataError",
    "CheckFailedError",
    "EmptyFragmentError",
    "EmptyMeshError",
    "__version__",
]
