"""Information gain, AUC, per-image improvement quantiles and bootstrap CIs."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from fixdens.data import DensityGrid, ValidationError

LOG2E = 1 / math.log(2)
REL_GUARD_BITS = 0.05
DEFAULT_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


@dataclass(frozen=True)
class MetricRecord:
    image_id: str
    ig_bits: float
    auc: float
    n_fixations: int

    def __post_init__(self):
        if not math.isfinite(self.ig_bits):
            raise ValidationError(f"{self.image_id}: non-finite information gain")
        if not 0.0 <= self.auc <= 1.0 and not math.isnan(self.auc):
            raise ValidationError(f"{self.image_id}: AUC {self.auc} outside [0, 1]")


def information_gain_bits(per_fixation_lognats, size) -> float:
    """Mean log2 density of the fixations minus log2 of the uniform density."""
    ll = np.asarray(per_fixation_lognats, dtype=np.float64)
    if ll.size == 0 or not np.isfinite(ll).all():
        raise ValidationError("information gain needs finite log densities")
    width, height = size
    # subtract in nats so a uniform model scores exactly zero
    return float((ll.mean() + math.log(width * height)) * LOG2E)


def auc_uniform(grid: DensityGrid, fixations) -> float:
    """AUC of fixated pixels against all pixels of the grid, ties counted half.

    Fixations map to pixels by flooring their continuous coordinates.
    """
    values = grid.to_probability().values
    xy = np.asarray(fixations, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        raise ValidationError("AUC needs at least one fixation")
    col = np.floor(xy[:, 0]).astype(int)
    row = np.floor(xy[:, 1]).astype(int)
    if (col < 0).any() or (row < 0).any() or (col >= grid.width).any() or (row >= grid.height).any():
        raise ValidationError("fixation outside the grid")
    flat = np.sort(values.ravel())
    pos = values[row, col]
    below = np.searchsorted(flat, pos, side="left")
    not_above = np.searchsorted(flat, pos, side="right")
    return float(np.mean((below + 0.5 * (not_above - below)) / flat.size))


def _by_id(records):
    out = {}
    for r in records:
        if r.image_id in out:
            raise ValidationError(f"duplicate record for image {r.image_id!r}")
        out[r.image_id] = r
    return out


@dataclass(frozen=True)
class QuantileTable:
    quantiles: tuple[float, ...]  # last entry is 1.0 (the maximum)
    d_ll: np.ndarray
    d_ll_rel: np.ndarray
    d_auc: np.ndarray
    n_images: int
    n_rel_excluded: int

    def rows(self):
        for i, q in enumerate(self.quantiles):
            label = "max" if q == 1.0 else f"{q:g}"
            yield label, self.d_ll[i], self.d_ll_rel[i], self.d_auc[i]


def improvement_quantiles(records_a: Sequence[MetricRecord], records_b: Sequence[MetricRecord], quantiles=DEFAULT_QUANTILES) -> QuantileTable:
    """Quantiles of per-image improvements b - a (linear interpolation), plus the max.

    The relative column divides by the baseline; images with
    ``|ig_a| < 0.05`` bits are left out of it.
    """
    a, b = _by_id(records_a), _by_id(records_b)
    if set(a) != set(b):
        raise ValidationError("record sets cover different images")
    if not a:
        raise ValidationError("no records")
    ids = sorted(a)
    ig_a = np.array([a[i].ig_bits for i in ids])
    d_ll = np.array([b[i].ig_bits for i in ids]) - ig_a
    d_auc = np.array([b[i].auc for i in ids]) - np.array([a[i].auc for i in ids])
    keep = np.abs(ig_a) >= REL_GUARD_BITS
    d_rel = d_ll[keep] / ig_a[keep]
    qs = tuple(float(q) for q in quantiles if q < 1.0) + (1.0,)

    def qfun(x):
        if x.size == 0:
            return np.full(len(qs), np.nan)
        return np.quantile(x, qs, method="linear")

    return QuantileTable(qs, qfun(d_ll), qfun(d_rel), qfun(d_auc), len(ids), int((~keep).sum()))


def write_quantile_csv(tables: Mapping[str, QuantileTable], path) -> None:
    """One block of columns (LL, LL_rel, AUC) per dataset."""
    names = list(tables)
    if not names:
        raise ValidationError("no tables to write")
    labels = [row[0] for row in tables[names[0]].rows()]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        header = ["quantile"]
        for n in names:
            header += [f"{n}:LL", f"{n}:LL_rel", f"{n}:AUC"]
        w.writerow(header)
        rows = {n: list(tables[n].rows()) for n in names}
        for i, label in enumerate(labels):
            line = [label]
            for n in names:
                _, dll, drel, dauc = rows[n][i]
                line += [f"{dll:.6g}", f"{drel:.6g}", f"{dauc:.6g}"]
            w.writerow(line)


def within_image_normalize(values) -> np.ndarray:
    """Cousineau normalization with Morey's correction.

    ``values`` is (n_images, n_models). Image means are removed and the grand
    mean restored; deviations from each model mean are then inflated by
    sqrt(M / (M - 1)). Model means are unchanged.
    """
    y = np.asarray(values, dtype=np.float64)
    n_models = y.shape[1]
    if n_models < 2:
        return y.copy()
    y = y - y.mean(axis=1, keepdims=True) + y.mean()
    model_mean = y.mean(axis=0, keepdims=True)
    return model_mean + (y - model_mean) * math.sqrt(n_models / (n_models - 1))


@dataclass(frozen=True)
class ConfidenceInterval:
    mean: float
    lo: float
    hi: float


def bootstrap_ci(values_by_model: Mapping[str, Sequence[float]], iterations: int = 10000, level: float = 0.95, seed: int = 0) -> dict[str, ConfidenceInterval]:
    """Percentile bootstrap over images of each model's mean.

    With two or more models the per-image values are first normalized
    within image (paired comparison). Single-model input is bootstrapped
    as is.
    """
    names = list(values_by_model)
    if not names:
        raise ValidationError("no models")
    y = np.column_stack([np.asarray(values_by_model[n], dtype=np.float64) for n in names])
    n_images = y.shape[0]
    if n_images < 2:
        raise ValidationError("bootstrap needs at least 2 images")
    if not np.isfinite(y).all():
        raise ValidationError("non-finite values")
    if not 0 < level < 1:
        raise ValidationError("level must lie in (0, 1)")
    y = within_image_normalize(y)
    rng = np.random.default_rng(seed)
    means = np.empty((iterations, y.shape[1]))
    batch = max(1, (1 << 22) // n_images)
    for start in range(0, iterations, batch):
        stop = min(iterations, start + batch)
        idx = rng.integers(0, n_images, size=(stop - start, n_images))
        means[start:stop] = y[idx].mean(axis=1)
    tail = (1 - level) / 2
    lo, hi = np.quantile(means, [tail, 1 - tail], axis=0)
    center = y.mean(axis=0)
    return {n: ConfidenceInterval(float(center[k]), float(lo[k]), float(hi[k])) for k, n in enumerate(names)}


def bootstrap_difference_ci(diffs, iterations: int = 10000, level: float = 0.95, seed: int = 0) -> ConfidenceInterval:
    """Percentile bootstrap CI of the mean of paired per-image differences."""
    return bootstrap_ci({"diff": diffs}, iterations, level, seed)["diff"]
