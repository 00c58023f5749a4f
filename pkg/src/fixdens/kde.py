"""Fixed- and adaptive-bandwidth Gaussian KDE on a bounded image.

Every kernel is an isotropic Gaussian truncated to the image rectangle
``[0, W) x [0, H)`` and renormalized analytically with the separable CDF
product, so each estimate is a proper density over the image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, logsumexp

from fixdens.data import DensityGrid, ValidationError

LOG_2PI = math.log(2 * math.pi)
_SQRT2 = math.sqrt(2.0)
_CHUNK = 1 << 20


@dataclass(frozen=True)
class FixedKernelParams:
    h: float

    def __post_init__(self):
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValidationError(f"bandwidth must be positive, got {self.h}")

    kind = "fixed"


@dataclass(frozen=True)
class AdaptiveKernelParams:
    h0: float
    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.h0) and self.h0 > 0):
            raise ValidationError(f"pilot bandwidth must be positive, got {self.h0}")
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValidationError(f"alpha must be positive, got {self.alpha}")

    kind = "adaptive"


KernelParams = FixedKernelParams | AdaptiveKernelParams


def _points(a, name) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    if not np.isfinite(a).all():
        raise ValidationError(f"non-finite {name}")
    return a


def _axis_mass(mu, h, extent):
    # Phi((E-mu)/h) - Phi(-mu/h) as a sum of two nonnegative erf terms
    return 0.5 * (erf((extent - mu) / (h * _SQRT2)) + erf(mu / (h * _SQRT2)))


def log_normalizer(sources, h, size) -> np.ndarray:
    """Log of the Gaussian mass inside the image for each source.

    ``h`` broadcasts against the source axis: a scalar, shape (M,), or
    (..., M) for several bandwidths per source.
    """
    sources = np.asarray(sources, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    width, height = size
    zx = _axis_mass(sources[:, 0], h, width)
    zy = _axis_mass(sources[:, 1], h, height)
    return np.log(zx) + np.log(zy)


def dlog_normalizer_dlogh(sources, h, size) -> np.ndarray:
    """Derivative of :func:`log_normalizer` with respect to log h."""
    sources = np.asarray(sources, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    out = 0.0
    for axis, extent in enumerate(size):
        mu = sources[:, axis]
        a = -mu / h
        b = (extent - mu) / h
        phi_a = np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)
        phi_b = np.exp(-0.5 * b * b) / math.sqrt(2 * math.pi)
        out = out + (a * phi_a - b * phi_b) / _axis_mass(mu, h, extent)
    return out


def log_kernel_matrix(queries, sources, h, size) -> np.ndarray:
    """Log truncated Gaussian kernel values, shape (Q, M).

    ``h`` is a scalar or a per-source array.
    """
    queries = np.asarray(queries, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    h = np.broadcast_to(np.asarray(h, dtype=np.float64), sources.shape[:1])
    d2 = ((queries[:, None, :] - sources[None, :, :]) ** 2).sum(-1)
    return -LOG_2PI - 2 * np.log(h) - log_normalizer(sources, h, size) - d2 / (2 * h * h)


def _mixture_logdensity(queries, sources, h, size) -> np.ndarray:
    n = len(sources)
    rows = max(1, _CHUNK // max(n, 1))
    out = np.empty(len(queries))
    for start in range(0, len(queries), rows):
        lk = log_kernel_matrix(queries[start:start + rows], sources, h, size)
        out[start:start + rows] = logsumexp(lk, axis=1) - math.log(n)
    return out


def fixed_kde_logdensity(sources, queries, h, size) -> np.ndarray:
    """Natural-log density of the fixed-bandwidth KDE at each query."""
    sources = _points(sources, "sources")
    queries = _points(queries, "queries")
    if len(sources) == 0:
        raise ValidationError("KDE needs at least one source")
    if not (np.isfinite(h) and h > 0):
        raise ValidationError(f"bandwidth must be positive, got {h}")
    return _mixture_logdensity(queries, sources, float(h), size)


def log_pilot_density(sources, h0, size) -> np.ndarray:
    """Log pilot density at each source; the source's own kernel is included."""
    return fixed_kde_logdensity(sources, sources, h0, size)


def pilot_density(sources, h0, size) -> np.ndarray:
    return np.exp(log_pilot_density(sources, h0, size))


def abramson_bandwidths(pilot_values, alpha) -> np.ndarray:
    """Per-source bandwidths ``alpha / sqrt(pilot)``."""
    p = np.asarray(pilot_values, dtype=np.float64)
    if not (p > 0).all():
        raise ValidationError("pilot density values must be positive")
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    return alpha / np.sqrt(p)


def adaptive_kde_logdensity(sources, bandwidths, queries, size) -> np.ndarray:
    """Natural-log density of the KDE with one bandwidth per source."""
    sources = _points(sources, "sources")
    queries = _points(queries, "queries")
    bandwidths = np.asarray(bandwidths, dtype=np.float64).ravel()
    if len(sources) == 0:
        raise ValidationError("KDE needs at least one source")
    if len(bandwidths) != len(sources):
        raise ValidationError(f"{len(bandwidths)} bandwidths for {len(sources)} sources")
    if not (np.isfinite(bandwidths).all() and (bandwidths > 0).all()):
        raise ValidationError("bandwidths must be positive and finite")
    return _mixture_logdensity(queries, sources, bandwidths, size)


def source_bandwidths(sources, params: KernelParams, size) -> np.ndarray:
    """Bandwidth of every source under ``params`` (pilot built on ``sources``)."""
    sources = _points(sources, "sources")
    if isinstance(params, FixedKernelParams):
        return np.full(len(sources), params.h)
    log_pilot = log_pilot_density(sources, params.h0, size)
    return params.alpha * np.exp(-0.5 * log_pilot)


def kde_logdensity(sources, queries, params: KernelParams, size) -> np.ndarray:
    if isinstance(params, FixedKernelParams):
        return fixed_kde_logdensity(sources, queries, params.h, size)
    return adaptive_kde_logdensity(sources, source_bandwidths(sources, params, size), queries, size)


def pixel_centers(size) -> tuple[np.ndarray, np.ndarray]:
    width, height = size
    return np.arange(width) + 0.5, np.arange(height) + 0.5


def axis_profiles(mu, h, extent):
    # (M, extent) truncated 1-d Gaussian densities at pixel centers
    c = np.arange(extent) + 0.5
    z = _axis_mass(mu, h, extent)
    return np.exp(-0.5 * ((c[None, :] - mu[:, None]) / h[:, None]) ** 2) / (
        math.sqrt(2 * math.pi) * h[:, None] * z[:, None]
    )


def kde_raster(sources, bandwidths, size) -> np.ndarray:
    """Unnormalized KDE density at pixel centers, shape (H, W).

    Each truncated kernel is separable, so the grid is a product of two
    profile matrices.
    """
    sources = _points(sources, "sources")
    h = np.broadcast_to(np.asarray(bandwidths, dtype=np.float64), sources.shape[:1])
    width, height = size
    gx = axis_profiles(sources[:, 0], h, width)
    gy = axis_profiles(sources[:, 1], h, height)
    return gy.T @ gx / len(sources)


def rasterize_kde(sources, params: KernelParams, size) -> DensityGrid:
    sources = _points(sources, "sources")
    if len(sources) == 0:
        raise ValidationError("cannot rasterize a KDE without sources")
    return DensityGrid.normalized(kde_raster(sources, source_bandwidths(sources, params, size), size))
