"""Single per-image density maps: locally crossvalidated and pooled."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from fixdens import mixture
from fixdens.data import DensityGrid, FixationTable, ImageRecord, ValidationError, write_grid
from fixdens.kde import KernelParams
from fixdens.mixture import ComponentSet, MixtureParams

RADIUS_RANGE = (5.0, 100.0)


def default_rbf_radius(table: FixationTable) -> float:
    """Median distance from each fixation to the nearest other-subject fixation, clamped to [5, 100] px."""
    xy, subj = table.xy, table.subjects
    d = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(-1))
    d[subj[:, None] == subj[None, :]] = np.inf
    nearest = d.min(axis=1)
    nearest = nearest[np.isfinite(nearest)]
    if nearest.size == 0:
        raise ValidationError(f"image {table.image_id!r}: need fixations from >= 2 subjects")
    return float(np.clip(np.median(nearest), *RADIUS_RANGE))


@dataclass(frozen=True)
class LosoDensityConfig:
    rbf_radius: float | None = None

    def radius_for(self, table: FixationTable) -> float:
        r = default_rbf_radius(table) if self.rbf_radius is None else float(self.rbf_radius)
        if not r > 0:
            raise ValidationError("rbf radius must be > 0")
        return r


@dataclass(frozen=True, eq=False)
class WeightMaps:
    subjects: tuple[str, ...]
    raw: np.ndarray  # (S, H, W) in [0, 1]
    normalized: np.ndarray  # (S, H, W), sums to 1 per pixel


def _subject_weight(points, r, size) -> np.ndarray:
    """max over the subject's fixations of max(0, 1 - d/r)^2 at pixel centers."""
    width, height = size
    out = np.zeros((height, width))
    for x, y in points:
        x0, x1 = max(0, int(math.floor(x - r))), min(width, int(math.ceil(x + r)) + 1)
        y0, y1 = max(0, int(math.floor(y - r))), min(height, int(math.ceil(y + r)) + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        cx = np.arange(x0, x1) + 0.5 - x
        cy = np.arange(y0, y1) + 0.5 - y
        d = np.sqrt(cy[:, None] ** 2 + cx[None, :] ** 2)
        w = np.maximum(0.0, 1.0 - d / r) ** 2
        np.maximum(out[y0:y1, x0:x1], w, out=out[y0:y1, x0:x1])
    return out


def rbf_weights(table: FixationTable, r: float, size) -> WeightMaps:
    """Squared-linear RBF weight per subject; dead zones get equal weights."""
    subjects = tuple(table.subject_ids)
    if len(subjects) < 2:
        raise ValidationError(f"image {table.image_id!r}: need >= 2 subjects")
    raw = np.stack([_subject_weight(table.xy[table.subjects == s], r, size) for s in subjects])
    total = raw.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.where(total > 0, raw / total, 1.0 / len(subjects))
    return WeightMaps(subjects, raw, norm)


def blend_fold_densities(table: FixationTable, fold_values: Mapping[str, np.ndarray], r: float) -> np.ndarray:
    """Pointwise sum_s w_s(x) p_s(x) before renormalization.

    ``fold_values[s]`` is the (H, W) density of the model trained without
    subject ``s``.
    """
    subjects = table.subject_ids
    missing = [s for s in subjects if s not in fold_values]
    if missing:
        raise ValidationError(f"missing fold model for subject(s) {', '.join(missing)}")
    shape = np.asarray(fold_values[subjects[0]]).shape
    size = (shape[1], shape[0])
    num = np.zeros(shape)
    den = np.zeros(shape)
    mean = np.zeros(shape)
    for s in subjects:
        p = np.asarray(fold_values[s], dtype=np.float64)
        if p.shape != shape:
            raise ValidationError("fold densities differ in shape")
        w = _subject_weight(table.xy[table.subjects == s], r, size)
        num += w * p
        den += w
        mean += p
    mean /= len(subjects)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / den, mean)


def fold_densities(image: ImageRecord, table: FixationTable, kernel_params: KernelParams | None, mixture_params: MixtureParams, components: ComponentSet) -> dict[str, np.ndarray]:
    """Rasterized LOSO fold mixtures, keyed by the held-out subject."""
    out = {}
    for s in table.subject_ids:
        train = table.xy[table.subjects != s]
        out[s] = mixture.mixture_raster(image, train, kernel_params, mixture_params, components).values
    return out


def locally_crossvalidated_density(image: ImageRecord, table: FixationTable, per_fold_models: Mapping[str, DensityGrid | np.ndarray], config: LosoDensityConfig = LosoDensityConfig()) -> DensityGrid:
    values = {
        s: (m.to_probability().values if isinstance(m, DensityGrid) else np.asarray(m))
        for s, m in per_fold_models.items()
    }
    for v in values.values():
        if v.shape != (image.height, image.width):
            raise ValidationError(f"image {image.image_id!r}: fold density shape {v.shape} does not match the image")
    return DensityGrid.normalized(blend_fold_densities(table, values, config.radius_for(table)))


def loso_density(image, table, kernel_params, mixture_params, components, config: LosoDensityConfig = LosoDensityConfig()) -> DensityGrid:
    """Fit every LOSO fold and blend them into one map."""
    folds = fold_densities(image, table, kernel_params, mixture_params, components)
    return locally_crossvalidated_density(image, table, folds, config)


def pooled_density(image: ImageRecord, table: FixationTable, kernel_params, mixture_params: MixtureParams, components: ComponentSet) -> DensityGrid:
    """Mixture with the KDE built on all fixations (not crossvalidated)."""
    return mixture.mixture_raster(image, table.xy, kernel_params, mixture_params, components)


def write_density(grid: DensityGrid, path, image_id: str, kind: str, r: float | None = None, params_ref: str | None = None) -> None:
    """FDG1 grid plus a ``.json`` sidecar describing it."""
    if kind not in ("loso", "pooled"):
        raise ValidationError(f"unknown density kind {kind!r}")
    path = Path(path)
    write_grid(grid, path)
    sidecar = {"image_id": image_id, "kind": kind, "r": r, "params_ref": params_ref}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")
