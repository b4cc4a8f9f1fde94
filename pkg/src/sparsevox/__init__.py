"""sparsevox - desk-scale sparse voxel 3D object detection with local and global feature aggregation."""

__version__ = "0.1.0"
__author__ = "sparsevox Contributors"
__license__ = "MIT"
