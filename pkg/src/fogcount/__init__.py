"""Fog-penetrating crowd counting at desk scale.

Differentiable atmospheric-scattering restoration, B-spline KAN feature
extraction, weather-aware graph attention, and a synthetic hierarchical
fog benchmark, all on a small numpy-backed reverse-mode tape.
"""

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad"]
__version__ = "0.1.0"
