"""Synthetic homogeneous fog: ``g = t * x + (1 - t) * A`` with ``t = exp(-beta * d)``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, TransmissionUnderflow
from .imagecore import DepthMap, Image
from .rng import SplitMix64

DEFAULT_AIRLIGHT = 0.5
DEFAULT_DEPTH_MAX = 10.0
TRANSMISSION_EPS = 1e-6

# dataset variants by fog density
FOG_LEVELS = {"low": 0.05, "medium": 0.10, "heavy": 0.15}


@dataclass(frozen=True)
class FogParams:
    beta: float
    airlight: float = DEFAULT_AIRLIGHT

    def __post_init__(self):
        if not (self.beta >= 0.0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if not 0.0 <= self.airlight <= 1.0:
            raise ValueError(f"airlight must lie in [0, 1], got {self.airlight}")


@dataclass(frozen=True)
class FogDistribution:
    beta_min: float = 0.0
    beta_max: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.beta_min <= self.beta_max:
            raise ValueError(f"need 0 <= beta_min <= beta_max, got [{self.beta_min}, {self.beta_max}]")


def transmission(d: DepthMap, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError("beta must be >= 0")
    return np.exp(-beta * d.data)


def _check_dims(img: Image, d: DepthMap) -> None:
    if (img.height, img.width) != (d.height, d.width):
        raise DimensionMismatch(
            f"image is {img.width}x{img.height} but depth is {d.width}x{d.height}"
        )


def render_fog_array(x: np.ndarray, t: np.ndarray, airlight: float) -> np.ndarray:
    """Blend an ``(h, w, 3)`` array toward the airlight by transmission ``t`` of shape ``(h, w)``."""
    t3 = t[..., None]
    return t3 * x + (1.0 - t3) * airlight


def render_fog(img: Image, d: DepthMap, p: FogParams) -> Image:
    _check_dims(img, d)
    g = render_fog_array(img.data, transmission(d, p.beta), p.airlight)
    # the blend is convex; clip only removes last-ulp excursions
    return Image(np.clip(g, 0.0, 1.0))


def defog_exact(foggy: Image, d: DepthMap, p: FogParams, eps: float = TRANSMISSION_EPS) -> np.ndarray:
    """Algebraic inverse of :func:`render_fog`.

    Returns the raw ``(h, w, 3)`` array rather than an :class:`Image`, since
    inverting a foggy image that was not produced by ``render_fog`` may leave
    [0, 1].
    """
    _check_dims(foggy, d)
    t = transmission(d, p.beta)
    if t.min() < eps:
        raise TransmissionUnderflow(f"transmission {t.min():.3g} below {eps:g}")
    t3 = t[..., None]
    return (foggy.data - (1.0 - t3) * p.airlight) / t3


def pseudo_depth(width: int, height: int) -> DepthMap:
    """Radial pseudo-depth, maximal at the image center and clamped at zero.

    Pixel ``(col, row)`` sits at integer coordinates; the center is
    ``(W/2, H/2)``.
    """
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    cols = np.arange(width, dtype=np.float64) - width / 2.0
    rows = np.arange(height, dtype=np.float64) - height / 2.0
    dist = np.hypot(cols[None, :], rows[:, None])
    d = math.sqrt(max(width, height)) - 0.04 * dist
    return DepthMap(np.maximum(d, 0.0))


def rescale_depth(d: DepthMap, d_max: float = DEFAULT_DEPTH_MAX) -> DepthMap:
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    peak = d.data.max()
    if peak == 0.0:
        return d
    if peak == d_max:
        return d
    # dividing first makes the peak map to exactly d_max
    return DepthMap((d.data / peak) * d_max)


def sample_beta(dist: FogDistribution, rng: SplitMix64) -> float:
    if dist.beta_min == dist.beta_max:
        # consume one draw so streams stay aligned regardless of the interval
        rng.uniform()
        return dist.beta_min
    return rng.uniform_range(dist.beta_min, dist.beta_max)
