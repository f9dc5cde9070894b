"""Image fitting with 2D Gaussian primitives and zero-shot low-light enhancement of their colors."""

from .core import GaussianSet, init_cold_start
from .raster import backward, build_tiles, render

__all__ = ["GaussianSet", "init_cold_start", "render", "build_tiles", "backward"]
__version__ = "0.1.0"
