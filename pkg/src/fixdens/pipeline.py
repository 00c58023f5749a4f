"""Dataset-level glue shared by the command line and the tests."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from fixdens import crossval, export, metrics, mixture, optimize
from fixdens.data import DatasetBundle, ValidationError, read_grid
from fixdens.kde import FixedKernelParams, KernelParams
from fixdens.mixture import COMPONENTS, CenterBiasModel, ComponentSet, MixtureParams

logger = logging.getLogger(__name__)

CB_MODES = ("holdout", "shared")


@dataclass(frozen=True)
class ModelSpec:
    kernel: str = "adaptive"
    active: tuple[bool, ...] = (True, True, True, False)
    scheme: str = "loso"
    cb_mode: str = "holdout"

    @property
    def mask(self) -> np.ndarray:
        return np.array(self.active, dtype=bool)


def check_model_inputs(dataset: DatasetBundle, spec: ModelSpec, images_dir=None) -> None:
    """Cheap consistency checks before any fitting."""
    if spec.kernel not in optimize.KERNEL_TYPES:
        raise ValidationError(f"unknown kernel {spec.kernel!r}")
    if spec.scheme not in crossval.SCHEMES:
        raise ValidationError(f"unknown plan {spec.scheme!r}")
    if spec.cb_mode not in CB_MODES:
        raise ValidationError(f"unknown center-bias mode {spec.cb_mode!r}")
    if not len(dataset):
        raise ValidationError("dataset has no images")
    mask = spec.mask
    if mask[mixture.CB] and len(dataset) < 2:
        raise ValidationError("center bias needs at least 2 images")
    if mask[mixture.SALIENCY]:
        for im in dataset.images:
            if not im.saliency_grid_path:
                raise ValidationError(f"saliency component active but image {im.image_id!r} has no saliency_grid_path")
            path = resolve(im.saliency_grid_path, images_dir)
            if not path.exists():
                raise ValidationError(f"saliency grid {path} for image {im.image_id!r} not found")


def resolve(path, base) -> Path:
    p = Path(path)
    if not p.is_absolute() and base is not None:
        p = Path(base) / p
    return p


def center_bias_for(dataset: DatasetBundle, image_id: str, mode: str, shared: CenterBiasModel | None = None, bandwidth: float | None = None) -> CenterBiasModel:
    """Center bias for ``image_id``; a known ``bandwidth`` skips the search."""
    if mode == "shared":
        if shared is not None:
            return shared
        if bandwidth is not None:
            pts, _ = mixture.normalized_points(dataset, [i for i in dataset.image_ids if len(dataset.fixations[i])])
            return CenterBiasModel(pts, bandwidth, crossvalidated=False)
        return mixture.fit_shared_center_bias(dataset)
    if bandwidth is not None:
        others = [i for i in dataset.image_ids if i != image_id and len(dataset.fixations[i])]
        pts, _ = mixture.normalized_points(dataset, others)
        return CenterBiasModel(pts, bandwidth)
    return mixture.fit_center_bias(dataset, image_id)


def components_for(dataset: DatasetBundle, image_id: str, spec: ModelSpec, images_dir=None, shared_cb=None, cb_bandwidth=None) -> ComponentSet:
    mask = spec.mask
    cb = center_bias_for(dataset, image_id, spec.cb_mode, shared_cb, cb_bandwidth) if mask[mixture.CB] else None
    sal = None
    if mask[mixture.SALIENCY]:
        im = dataset.image(image_id)
        sal = mixture.SaliencyComponent(read_grid(resolve(im.saliency_grid_path, images_dir)))
    return ComponentSet(cb, sal)


def params_to_json(image_id: str, result: optimize.OptimResult, spec: ModelSpec, components: ComponentSet, mode: str) -> dict:
    d = result.to_dict(image_id)
    d["scheme"] = spec.scheme
    d["fit"] = mode
    if components.center_bias is not None:
        d["center_bias"] = {"bandwidth": components.center_bias.bandwidth, "mode": spec.cb_mode}
    return d


def params_from_json(d: Mapping) -> tuple[KernelParams | None, MixtureParams, ModelSpec, float | None]:
    active = tuple(c in d["active"] for c in COMPONENTS)
    logits = np.array([d["logits"].get(c, 0.0) for c in COMPONENTS])
    kp = crossval.kernel_from_dict(d.get("kernel"))
    cb = d.get("center_bias") or {}
    spec = ModelSpec(
        kernel=(d.get("kernel") or {}).get("type", "fixed"),
        active=active,
        scheme=d.get("scheme", "loso"),
        cb_mode=cb.get("mode", "holdout"),
    )
    return kp, MixtureParams(logits, active), spec, cb.get("bandwidth")


def write_json_atomic(obj, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_params_dir(params_dir) -> dict[str, dict]:
    manifest = json.loads((Path(params_dir) / "manifest.json").read_text(encoding="utf-8"))
    return {i: json.loads((Path(params_dir) / "params" / f"{i}.json").read_text(encoding="utf-8")) for i in manifest["images"]}


def _fit_one(args):
    dataset, image_id, spec, config, images_dir = args
    comp = components_for(dataset, image_id, spec, images_dir)
    table = dataset.fixations[image_id]
    result = optimize.optimize_image(dataset.image(image_id), table, config, spec.scheme, comp, spec.kernel, spec.mask)
    return image_id, params_to_json(image_id, result, spec, comp, "per-image")


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def fit_dataset(dataset: DatasetBundle, spec: ModelSpec, config: optimize.OptimConfig, per_image: bool = True, images_dir=None, jobs: int = 1) -> dict[str, dict]:
    """Optimized parameters for every crossvalidatable image, as JSON-ready dicts."""
    check_model_inputs(dataset, spec, images_dir)
    ids = dataset.crossvalidatable_ids
    if not ids:
        raise ValidationError("no crossvalidatable images (each needs >= 2 subjects)")
    if per_image:
        return dict(_map(_fit_one, [(dataset, i, spec, config, images_dir) for i in ids], jobs))
    shared_cb = mixture.fit_shared_center_bias(dataset) if spec.mask[mixture.CB] and spec.cb_mode == "shared" else None
    comps = {i: components_for(dataset, i, spec, images_dir, shared_cb) for i in ids}
    result = optimize.optimize_global(dataset, config, spec.scheme, comps, spec.kernel, spec.mask)
    return {i: params_to_json(i, result, spec, comps[i], "global") for i in ids}


def fixed_reference_params(dataset: DatasetBundle, h_px: Mapping[str, float]) -> dict[str, dict]:
    """Unoptimized fixed-bandwidth KDE-only parameters."""
    out = {}
    spec = ModelSpec("fixed", (True, False, False, False))
    for i in dataset.crossvalidatable_ids:
        kp = FixedKernelParams(h_px[i])
        mp = MixtureParams(np.zeros(4), spec.mask)
        table = dataset.fixations[i]
        ev = crossval.evaluate_image(dataset.image(i), table, kp, mp, ComponentSet(), crossval.make_fold_plan(table, "loso"))
        res = optimize.OptimResult(kp, mp, ev.mean_ll, (ev.mean_ll,), (0,), False, optimize.pack(kp, mp))
        out[i] = params_to_json(i, res, spec, ComponentSet(), "fixed-reference")
    return out


def write_params_dir(params: Mapping[str, dict], outdir, extra: Mapping | None = None) -> None:
    outdir = Path(outdir)
    (outdir / "params").mkdir(parents=True, exist_ok=True)
    for image_id, d in params.items():
        write_json_atomic(d, outdir / "params" / f"{image_id}.json")
    manifest = {"images": sorted(params), **(extra or {})}
    write_json_atomic(manifest, outdir / "manifest.json")


def _model_for(dataset, image_id, pdict, images_dir, shared_cache):
    kp, mp, spec, cb_bw = params_from_json(pdict)
    shared = None
    if spec.mask[mixture.CB] and spec.cb_mode == "shared":
        key = ("shared", cb_bw)
        if key not in shared_cache:
            shared_cache[key] = center_bias_for(dataset, image_id, "shared", None, cb_bw)
        shared = shared_cache[key]
    comp = components_for(dataset, image_id, spec, images_dir, shared, cb_bw)
    return kp, mp, comp


def evaluate_dataset(dataset: DatasetBundle, params: Mapping[str, dict], scheme: str, images_dir=None, with_auc: bool = False) -> tuple[list[crossval.ImageResult], dict, dict[str, float]]:
    """Held-out evaluation of fitted parameters; optional AUC of the exported density."""
    per_image, comps, aucs = {}, {}, {}
    cache: dict = {}
    for image_id in dataset.image_ids:
        if image_id not in params:
            continue
        kp, mp, comp = _model_for(dataset, image_id, params[image_id], images_dir, cache)
        per_image[image_id] = (kp, mp)
        comps[image_id] = comp
    sub = DatasetBundle(
        tuple(dataset.image(i) for i in per_image), {i: dataset.fixations[i] for i in per_image}
    )
    results, summary = crossval.ioc_summary(sub, per_image, scheme, comps)
    if with_auc:
        for r in results:
            im, table = dataset.image(r.image_id), dataset.fixations[r.image_id]
            kp, mp = per_image[r.image_id]
            if scheme == "pooled":
                grid = export.pooled_density(im, table, kp, mp, comps[r.image_id])
            else:
                grid = export.loso_density(im, table, kp, mp, comps[r.image_id])
            aucs[r.image_id] = metrics.auc_uniform(grid, table.xy)
    return results, summary, aucs


def metric_records(results, aucs) -> list[metrics.MetricRecord]:
    return [metrics.MetricRecord(r.image_id, r.ig_bits, aucs.get(r.image_id, math.nan), r.n_fixations) for r in results]


def parameter_values(params: Mapping[str, dict]) -> dict[str, dict[str, float]]:
    """Per-parameter values by image: bandwidths, alpha and mixture weights."""
    out: dict[str, dict[str, float]] = {}
    for image_id, d in params.items():
        k = d.get("kernel") or {}
        for name in ("h", "h0", "alpha"):
            if name in k:
                label = {"h": "bandwidth", "h0": "pilot_bandwidth", "alpha": "alpha"}[name]
                out.setdefault(label, {})[image_id] = float(k[name])
        for comp, w in d.get("weights", {}).items():
            out.setdefault(f"weight_{comp}", {})[image_id] = float(w)
    return out


def parameter_extremes(params: Mapping[str, dict], k: int = 3) -> dict[str, dict[str, list]]:
    """For each parameter, the ``k`` lowest- and highest-valued images."""
    out = {}
    for name, values in sorted(parameter_values(params).items()):
        ranked = sorted(values.items(), key=lambda kv: (kv[1], kv[0]))
        out[name] = {
            "lowest": [[i, v] for i, v in ranked[:k]],
            "highest": [[i, v] for i, v in reversed(ranked[-k:])],
        }
    return out
