"""Gist algebra: the (alignment, residual) decomposition of a style translation.

A gist ``(M, N)`` maps an image ``x`` to ``x * M + N`` elementwise. Every
function here is layout agnostic and works on numpy arrays and torch tensors
alike, so the same code serves the float64 reference path and the training
graph. Nothing is clamped; callers clamp at export.
"""

from dataclasses import dataclass
from typing import Any

import numpy as np

# domainness presets used at test time (Cityscapes-like / Synscapes-like targets)
Z_PRESETS = {"cityscapes": 0.88, "synscapes": 0.9}
DEFAULT_Z = Z_PRESETS["synscapes"]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Gist:
    M: Any
    N: Any

    def __post_init__(self):
        if tuple(self.M.shape) != tuple(self.N.shape):
            raise ShapeError(
                f"gist maps disagree: M{tuple(self.M.shape)} vs N{tuple(self.N.shape)}"
            )

    @classmethod
    def identity(cls, shape, dtype=np.float64) -> "Gist":
        return cls(np.ones(shape, dtype=dtype), np.zeros(shape, dtype=dtype))

    @property
    def shape(self):
        return tuple(self.M.shape)


def _check_shapes(x, g: Gist):
    if tuple(x.shape) != g.shape:
        raise ShapeError(f"image shape {tuple(x.shape)} does not match gist shape {g.shape}")


def apply_gist(x, g: Gist):
    """Return ``x * g.M + g.N`` without clamping."""
    _check_shapes(x, g)
    return x * g.M + g.N


def interpolate_domain(x, g: Gist, z: float):
    """Partially apply ``g`` with domainness ``z`` in [0, 1].

    ``z = 0`` returns ``x`` and ``z = 1`` returns ``apply_gist(x, g)``, both
    exactly; in between the result is affine in ``z``.
    """
    z = float(z)
    if not 0.0 <= z <= 1.0:
        raise ValueError(f"domainness z must lie in [0, 1], got {z}")
    _check_shapes(x, g)
    # endpoints short-circuit so they hold bitwise
    if z == 0.0:
        return x * 1
    if z == 1.0:
        return apply_gist(x, g)
    return x * ((g.M - 1) * z + 1) + g.N * z


def invert_gist(g: Gist) -> Gist:
    """Algebraic inverse: ``(1/M, -N/M)``. Requires ``M > 0`` everywhere."""
    if bool((g.M <= 0).any()):
        raise ValueError("cannot invert a gist whose alignment map has non-positive entries")
    return Gist(1 / g.M, -g.N / g.M)
