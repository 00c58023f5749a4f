"""Fold construction and held-out likelihood evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from fixdens import mixture
from fixdens.data import DatasetBundle, FixationTable, ImageRecord, ValidationError
from fixdens.kde import AdaptiveKernelParams, FixedKernelParams, KernelParams
from fixdens.mixture import ComponentSet, MixtureParams

logger = logging.getLogger(__name__)

SCHEMES = ("loso", "lofo", "pooled")
LOG2E = 1 / math.log(2)


@dataclass(frozen=True, eq=False)
class FoldPlan:
    scheme: str
    folds: tuple[tuple[np.ndarray, np.ndarray], ...]
    n_fixations: int

    @property
    def crossvalidated(self) -> bool:
        return self.scheme != "pooled"

    def test_fold_index(self) -> np.ndarray:
        """Fold that scores each fixation; -1 where a fixation is never tested."""
        out = np.full(self.n_fixations, -1)
        for f, (_, test) in enumerate(self.folds):
            out[test] = f
        return out

    def train_mask(self) -> np.ndarray:
        """(n_folds, N) boolean training membership."""
        m = np.zeros((len(self.folds), self.n_fixations), dtype=bool)
        for f, (train, _) in enumerate(self.folds):
            m[f, train] = True
        return m


def make_fold_plan(table: FixationTable, scheme: str) -> FoldPlan:
    scheme = scheme.lower()
    n = len(table)
    idx = np.arange(n)
    if scheme == "loso":
        subjects = table.subject_ids
        if len(subjects) < 2:
            raise ValidationError(f"image {table.image_id!r}: LOSO needs >= 2 subjects, has {len(subjects)}")
        folds = []
        for s in subjects:
            held = table.subjects == s
            folds.append((idx[~held], idx[held]))
    elif scheme == "lofo":
        if n < 2:
            raise ValidationError(f"image {table.image_id!r}: LOFO needs >= 2 fixations, has {n}")
        folds = [(np.delete(idx, i), idx[i:i + 1]) for i in range(n)]
    elif scheme == "pooled":
        if n < 1:
            raise ValidationError(f"image {table.image_id!r}: no fixations")
        folds = [(idx, idx)]
    else:
        raise ValidationError(f"unknown fold scheme {scheme!r}; choose from {', '.join(SCHEMES)}")
    for train, test in folds:
        train.setflags(write=False)
        test.setflags(write=False)
    return FoldPlan(scheme, tuple(folds), n)


@dataclass(frozen=True, eq=False)
class FoldEval:
    image_id: str
    scheme: str
    log_densities: np.ndarray  # natural log, one per evaluated fixation

    @property
    def n_fixations(self) -> int:
        return len(self.log_densities)

    @property
    def mean_ll(self) -> float:
        return float(np.mean(self.log_densities))


def evaluate_image(
    image: ImageRecord,
    table: FixationTable,
    kernel_params: KernelParams | None,
    mixture_params: MixtureParams,
    components: ComponentSet,
    plan: FoldPlan,
) -> FoldEval:
    """Held-out mixture log densities, rebuilding the KDE from each fold's training fixations."""
    mixture.check_components(image, mixture_params.active, components)
    if plan.n_fixations != len(table):
        raise ValidationError("fold plan does not match the fixation table")
    xy = table.xy
    fixed = mixture.fixed_component_logdensities(image, components, xy)
    out = np.full(len(table), np.nan)
    for train, test in plan.folds:
        lds = np.empty((4, len(test)))
        lds[1:] = fixed[:, test]
        if mixture_params.active[mixture.KDE]:
            if len(train) == 0:
                raise ValidationError(f"image {image.image_id!r}: fold with empty training set")
            lds[0] = mixture.kde.kde_logdensity(xy[train], xy[test], kernel_params, image.size)
        else:
            lds[0] = np.nan
        out[test] = mixture.mixture_logdensity(mixture_params, lds)
    tested = ~np.isnan(out)
    return FoldEval(image.image_id, plan.scheme, out[tested])


def information_gain_bits(mean_ll_nats: float, image: ImageRecord) -> float:
    return (mean_ll_nats - image.log_uniform) * LOG2E


def kernel_to_dict(params: KernelParams | None) -> dict | None:
    if params is None:
        return None
    if isinstance(params, FixedKernelParams):
        return {"type": "fixed", "h": float(params.h)}
    return {"type": "adaptive", "h0": float(params.h0), "alpha": float(params.alpha)}


def kernel_from_dict(d: Mapping | None) -> KernelParams | None:
    if d is None:
        return None
    if d["type"] == "fixed":
        return FixedKernelParams(float(d["h"]))
    if d["type"] == "adaptive":
        return AdaptiveKernelParams(float(d["h0"]), float(d["alpha"]))
    raise ValidationError(f"unknown kernel type {d['type']!r}")


@dataclass(frozen=True)
class ImageResult:
    image_id: str
    scheme: str
    mean_ll_nats: float
    ig_bits: float
    n_fixations: int
    params: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_id": self.image_id,
                "scheme": self.scheme,
                "mean_ll_nats": self.mean_ll_nats,
                "ig_bits": self.ig_bits,
                "n_fixations": self.n_fixations,
                "params": self.params,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> ImageResult:
        d = json.loads(line)
        return cls(d["image_id"], d["scheme"], d["mean_ll_nats"], d["ig_bits"], d["n_fixations"], d["params"])


def ioc_summary(
    dataset: DatasetBundle,
    per_image_params: Mapping[str, tuple[KernelParams | None, MixtureParams]],
    scheme: str,
    components: Mapping[str, ComponentSet] | None = None,
) -> tuple[list[ImageResult], dict]:
    """Per-image information gain over uniform and dataset aggregates.

    The dataset summary reports the unweighted mean over images
    (``ig_bits``) and the fixation-weighted mean (``ig_bits_fixation_weighted``).
    """
    results = []
    for image_id in dataset.crossvalidatable_ids if scheme != "pooled" else dataset.image_ids:
        table = dataset.fixations[image_id]
        if len(table) == 0:
            continue
        if image_id not in per_image_params:
            raise ValidationError(f"no parameters for image {image_id!r}")
        image = dataset.image(image_id)
        kernel_params, mixture_params = per_image_params[image_id]
        comp = (components or {}).get(image_id, ComponentSet())
        ev = evaluate_image(image, table, kernel_params, mixture_params, comp, make_fold_plan(table, scheme))
        results.append(
            ImageResult(
                image_id,
                scheme,
                ev.mean_ll,
                information_gain_bits(ev.mean_ll, image),
                ev.n_fixations,
                {"kernel": kernel_to_dict(kernel_params), **mixture_params.to_dict()},
            )
        )
    summary = summarize(results)
    if scheme == "pooled":
        logger.warning("pooled evaluation includes each fixation's own kernel and is not crossvalidated")
    return results, summary


def summarize(results) -> dict:
    if not results:
        return {"n_images": 0}
    ig = np.array([r.ig_bits for r in results])
    ll = np.array([r.mean_ll_nats for r in results])
    n = np.array([r.n_fixations for r in results])
    scheme = results[0].scheme
    return {
        "scheme": scheme,
        "crossvalidated": scheme != "pooled",
        "n_images": len(results),
        "n_fixations": int(n.sum()),
        "ig_bits": float(ig.mean()),
        "mean_ll_nats": float(ll.mean()),
        "ig_bits_fixation_weighted": float((ig * n).sum() / n.sum()),
    }


def write_results_jsonl(results, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(r.to_json() + "\n")


def read_results_jsonl(path) -> list[ImageResult]:
    with open(path, encoding="utf-8") as f:
        return [ImageResult.from_json(line) for line in f if line.strip()]
