"""Decomposed radiance fields: many small heads on a learned Voronoi partition,
rendered cell by cell in back-to-front order."""

from .field import ArchitectureDescriptor, DerfModel, derf_eval
from .geometry import Camera, Ray, generate_rays
from .render import painter_render_image, render_image
from .voronoi import VoronoiDecomposition

__all__ = ["ArchitectureDescriptor", "Camera", "DerfModel", "Ray", "VoronoiDecomposition", "derf_eval",
           "generate_rays", "painter_render_image", "render_image"]
__version__ = "0.1.0"
