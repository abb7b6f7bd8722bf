"""Multi-view to 4D Gaussian splatting: image-matrix synthesis, static fitting and deformation fields."""

from .camera import CameraIntrinsics, SphericalPose, matrix_rig
from .deformation import DeformationField, DynamicConfig, deform, fit_dynamic
from .errors import Splat4dError
from .image_matrix import ImageMatrix, load_matrix, save_matrix, synthesize_matrix
from .rasterizer import render, render_backward
from .scene import GaussianCloud, make_preset
from .static_fit import StaticConfig, fit_static

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "DeformationField", "DynamicConfig", "GaussianCloud", "ImageMatrix",
    "SphericalPose", "Splat4dError", "deform", "fit_dynamic", "fit_static", "load_matrix",
    "make_preset", "matrix_rig", "render", "render_backward", "save_matrix", "StaticConfig",
    "synthesize_matrix",
]
