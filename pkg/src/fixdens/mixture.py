"""Four-component mixture: KDE, center bias, uniform and saliency."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import logsumexp

from fixdens import kde
from fixdens.data import DatasetBundle, DensityGrid, ImageRecord, ValidationError

logger = logging.getLogger(__name__)

COMPONENTS = ("kde", "cb", "uniform", "saliency")
KDE, CB, UNIFORM, SALIENCY = range(4)

SALIENCY_EPSILON = 1e-6
CB_BANDWIDTH_RANGE = (1e-3, 1.0)
_GOLDEN = (math.sqrt(5) - 1) / 2


def parse_components(spec: str | None) -> np.ndarray:
    """``"kde,cb,uniform"`` -> boolean activity mask in COMPONENTS order."""
    if spec is None:
        return np.ones(4, dtype=bool)
    names = [s.strip().lower() for s in spec.split(",") if s.strip()]
    aliases = {"centerbias": "cb", "center_bias": "cb", "u": "uniform", "s": "saliency", "sal": "saliency"}
    mask = np.zeros(4, dtype=bool)
    for n in names:
        n = aliases.get(n, n)
        if n not in COMPONENTS:
            raise ValidationError(f"unknown mixture component {n!r}; choose from {', '.join(COMPONENTS)}")
        mask[COMPONENTS.index(n)] = True
    if not mask.any():
        raise ValidationError("at least one mixture component must be active")
    return mask


@dataclass(frozen=True, eq=False)
class MixtureParams:
    """Softmax weights over the active components.

    The logit of the first active component (the KDE, when active) is pinned
    to 0; inactive components carry weight exactly 0.
    """

    logits: np.ndarray = field(default_factory=lambda: np.zeros(4))
    active: np.ndarray = field(default_factory=lambda: np.ones(4, dtype=bool))

    def __post_init__(self):
        z = np.array(self.logits, dtype=np.float64).reshape(4)
        a = np.array(self.active, dtype=bool).reshape(4)
        if not a.any():
            raise ValidationError("all mixture components disabled")
        z[self.pinned_index_for(a)] = 0.0
        z.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "logits", z)
        object.__setattr__(self, "active", a)

    @staticmethod
    def pinned_index_for(active) -> int:
        return int(np.flatnonzero(active)[0])

    @property
    def pinned_index(self) -> int:
        return self.pinned_index_for(self.active)

    @property
    def log_weights(self) -> np.ndarray:
        z = np.where(self.active, self.logits, -np.inf)
        return z - logsumexp(z)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def to_dict(self) -> dict:
        return {
            "logits": {c: float(z) for c, z, a in zip(COMPONENTS, self.logits, self.active) if a},
            "weights": {c: float(w) for c, w, a in zip(COMPONENTS, self.weights, self.active) if a},
        }


@dataclass(frozen=True, eq=False)
class CenterBiasModel:
    """KDE over fixations of other images in normalized coordinates (x/W, y/H)."""

    points: np.ndarray
    bandwidth: float
    crossvalidated: bool = True

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            raise ValidationError("center bias needs at least one fixation")
        if not self.bandwidth > 0:
            raise ValidationError("center bias bandwidth must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def logdensity(self, queries, size) -> np.ndarray:
        """Log density per square pixel on an image of ``size`` (W, H)."""
        width, height = size
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 2) / np.array([width, height], dtype=np.float64)
        return kde.fixed_kde_logdensity(self.points, q, self.bandwidth, (1.0, 1.0)) - math.log(width * height)

    def raster(self, size) -> np.ndarray:
        """Density per square pixel at pixel centers, shape (H, W).

        In pixel units the kernel is separable with bandwidth ``b*W`` along x
        and ``b*H`` along y.
        """
        width, height = size
        out = np.zeros((height, width))
        step = max(1, (1 << 22) // (width + height))
        for start in range(0, len(self.points), step):
            p = self.points[start:start + step]
            gx = kde.axis_profiles(p[:, 0] * width, np.full(len(p), self.bandwidth * width), width)
            gy = kde.axis_profiles(p[:, 1] * height, np.full(len(p), self.bandwidth * height), height)
            out += gy.T @ gx
        return out / len(self.points)

    def rasterize(self, size) -> DensityGrid:
        return DensityGrid.normalized(self.raster(size))


def normalized_points(dataset: DatasetBundle, image_ids):
    pts, labels = [], []
    for k, image_id in enumerate(image_ids):
        im = dataset.image(image_id)
        xy = dataset.fixations[image_id].xy
        pts.append(xy / np.array([im.width, im.height], dtype=np.float64))
        labels.append(np.full(len(xy), k))
    if not pts:
        return np.zeros((0, 2)), np.zeros(0, dtype=int)
    return np.concatenate(pts), np.concatenate(labels)


def _per_image_log_sums(points, labels, n_groups, bandwidth) -> np.ndarray:
    """log sum of kernel values from each image group, shape (F, n_groups)."""
    out = np.full((len(points), n_groups), -np.inf)
    order = np.argsort(labels, kind="stable")
    pts, lab = points[order], labels[order]
    bounds = np.searchsorted(lab, np.arange(n_groups + 1))
    rows = max(1, (1 << 20) // max(len(points), 1))
    for start in range(0, len(points), rows):
        lk = kde.log_kernel_matrix(points[start:start + rows], pts, bandwidth, (1.0, 1.0))
        for g in range(n_groups):
            lo, hi = bounds[g], bounds[g + 1]
            if hi > lo:
                out[start:start + rows, g] = logsumexp(lk[:, lo:hi], axis=1)
    return out


def leave_one_image_out_ll(points, labels, n_groups, bandwidth) -> float:
    """Mean log density of every fixation under the KDE of all other images."""
    sums = _per_image_log_sums(points, labels, n_groups, bandwidth)
    counts = np.bincount(labels, minlength=n_groups)
    own = np.zeros_like(sums, dtype=bool)
    own[np.arange(len(labels)), labels] = True
    other = np.where(own, -np.inf, sums)
    n_other = len(labels) - counts[labels]
    with np.errstate(divide="ignore"):
        ll = logsumexp(other, axis=1) - np.log(n_other)
    return float(np.mean(ll))


def golden_section_max(f, lo, hi, tol=1e-3, max_iter=100):
    """Maximize a unimodal ``f`` on ``[lo, hi]``; returns (x, f(x))."""
    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def _fit_on(dataset: DatasetBundle, image_ids, crossvalidated) -> CenterBiasModel:
    image_ids = [i for i in image_ids if len(dataset.fixations[i])]
    if not image_ids:
        raise ValidationError("no other images with fixations to fit the center bias")
    points, labels = normalized_points(dataset, image_ids)
    if len(image_ids) == 1:
        # nothing to cross-validate against; fall back to a rule-of-thumb width
        bw = float(np.clip(points.std() * len(points) ** (-1 / 6), *CB_BANDWIDTH_RANGE))
        logger.warning("center bias fitted on a single image; bandwidth set by rule of thumb (%.4g)", bw)
        return CenterBiasModel(points, bw, crossvalidated)

    def objective(log_bw):
        return leave_one_image_out_ll(points, labels, len(image_ids), math.exp(log_bw))

    lo, hi = (math.log(v) for v in CB_BANDWIDTH_RANGE)
    log_bw, _ = golden_section_max(objective, lo, hi)
    return CenterBiasModel(points, math.exp(log_bw), crossvalidated)


def fit_center_bias(dataset: DatasetBundle, holdout_image_id: str) -> CenterBiasModel:
    """Center bias from every image except ``holdout_image_id``.

    The bandwidth maximizes the leave-one-image-out log-likelihood over the
    remaining images (golden-section search over log-bandwidth).
    """
    others = [i for i in dataset.image_ids if i != holdout_image_id]
    if not others:
        raise ValidationError(f"no images other than {holdout_image_id!r} to fit the center bias")
    return _fit_on(dataset, others, crossvalidated=True)


def fit_shared_center_bias(dataset: DatasetBundle) -> CenterBiasModel:
    """Single center bias from all images (fast mode, not crossvalidated)."""
    return _fit_on(dataset, dataset.image_ids, crossvalidated=False)


@dataclass(frozen=True, eq=False)
class SaliencyComponent:
    grid: DensityGrid
    epsilon: float = SALIENCY_EPSILON

    def __post_init__(self):
        grid = self.grid.to_probability()
        grid.check()
        object.__setattr__(self, "grid", grid)

    def _floor(self):
        return self.epsilon / (self.grid.width * self.grid.height)

    def logdensity(self, queries) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        # node (i, j) sits at pixel center (i+0.5, j+0.5)
        coords = np.vstack([q[:, 1] - 0.5, q[:, 0] - 0.5])
        v = map_coordinates(self.grid.values, coords, order=1, mode="nearest")
        return np.log(np.maximum(v, self._floor()))

    def raster(self) -> np.ndarray:
        return np.maximum(self.grid.values, self._floor())


@dataclass(frozen=True)
class ComponentSet:
    """Fold-independent inputs to the mixture for one image."""

    center_bias: CenterBiasModel | None = None
    saliency: SaliencyComponent | None = None


def check_components(image: ImageRecord, active, components: ComponentSet) -> None:
    active = np.asarray(active, dtype=bool)
    if active[CB] and components.center_bias is None:
        raise ValidationError(f"image {image.image_id!r}: center bias active but no center bias model")
    if active[SALIENCY]:
        if components.saliency is None:
            raise ValidationError(f"image {image.image_id!r}: saliency active but no saliency grid")
        g = components.saliency.grid
        if (g.width, g.height) != (image.width, image.height):
            raise ValidationError(
                f"image {image.image_id!r}: saliency grid is {g.width}x{g.height}, image is {image.width}x{image.height}"
            )


def fixed_component_logdensities(image: ImageRecord, components: ComponentSet, queries) -> np.ndarray:
    """Log densities of center bias, uniform and saliency, shape (3, Q).

    Missing components yield NaN rows.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    out = np.full((3, len(q)), np.nan)
    if components.center_bias is not None:
        out[0] = components.center_bias.logdensity(q, image.size)
    out[1] = image.log_uniform
    if components.saliency is not None:
        out[2] = components.saliency.logdensity(q)
    return out


def component_logdensities(image: ImageRecord, train_xy, kernel_params, components: ComponentSet, queries) -> np.ndarray:
    """Per-component log densities at ``queries``, shape (4, Q), COMPONENTS order."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
    if len(q) and ((q < 0).any() or (q[:, 0] >= image.width).any() or (q[:, 1] >= image.height).any()):
        raise ValidationError(f"image {image.image_id!r}: query outside image bounds")
    out = np.empty((4, len(q)))
    if kernel_params is not None and len(train_xy):
        out[KDE] = kde.kde_logdensity(train_xy, q, kernel_params, image.size)
    else:
        out[KDE] = np.nan
    out[1:] = fixed_component_logdensities(image, components, q)
    return out


def mixture_logdensity(params: MixtureParams, component_lds) -> np.ndarray:
    """log sum_k w_k exp(l_k) over the active components."""
    lds = np.asarray(component_lds, dtype=np.float64)
    idx = np.flatnonzero(params.active)
    sub = lds[idx]
    if np.isnan(sub).any():
        missing = [COMPONENTS[i] for i in idx if np.isnan(lds[i]).any()]
        raise ValidationError(f"active component(s) without log densities: {', '.join(missing)}")
    return logsumexp(sub + params.log_weights[idx, None], axis=0)


def mixture_raster(image: ImageRecord, train_xy, kernel_params, params: MixtureParams, components: ComponentSet) -> DensityGrid:
    """Mixture density at pixel centers, renormalized to sum to 1."""
    check_components(image, params.active, components)
    w = params.weights
    total = np.zeros((image.height, image.width))
    if params.active[KDE]:
        bw = kde.source_bandwidths(train_xy, kernel_params, image.size)
        total += w[KDE] * kde.kde_raster(train_xy, bw, image.size)
    if params.active[CB]:
        total += w[CB] * components.center_bias.raster(image.size)
    if params.active[UNIFORM]:
        total += w[UNIFORM] * math.exp(image.log_uniform)
    if params.active[SALIENCY]:
        total += w[SALIENCY] * components.saliency.raster()
    return DensityGrid.normalized(total)
