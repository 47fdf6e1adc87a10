"""Point-cloud guided Gaussian splatting for single-layer surface reconstruction."""

__version__ = "0.1.0"

from .core import (CameraModel, DensePointCloud, GaussianCloud,
                   GaussianPrimitive, GgsError, TriangleMesh)

__all__ = ["CameraModel", "DensePointCloud", "GaussianCloud",
           "GaussianPrimitive", "GgsError", "TriangleMesh", "__version__"]
