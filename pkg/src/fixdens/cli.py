"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 computation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from fixdens import crossval, export, metrics, mixture, optimize, pipeline, render, synth
from fixdens.data import DensityGrid, ValidationError, load_dataset, read_grid, read_text_grid, write_grid

logger = logging.getLogger("fixdens")

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTATION = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors, so they exit with status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _add_dataset_args(p):
    p.add_argument("--fixations", required=True, help="fixation CSV (image_id,subject_id,x,y)")
    p.add_argument("--images", required=True, help="image metadata JSON")
    p.add_argument("--exclude", help="plain-text exclusion list, one image_id per line")


def _load(args):
    return load_dataset(args.fixations, args.images, args.exclude)


def _images_dir(args):
    return Path(args.images).resolve().parent


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fixdens", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option defaults (flags take precedence)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="image-level parallelism")

    p = parser.subcommands["fit"] = sub.add_parser("fit", parents=[common], help="optimize per-image or global parameters")
    _add_dataset_args(p)
    p.add_argument("--kernel", choices=optimize.KERNEL_TYPES, default="adaptive")
    p.add_argument("--components", default=None, help="comma list from kde,cb,uniform,saliency")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--per-image", dest="per_image", action="store_true", default=True)
    g.add_argument("--global", dest="per_image", action="store_false")
    p.add_argument("--plan", choices=("loso", "lofo"), default="loso")
    p.add_argument("--restarts", type=int, default=50)
    p.add_argument("--h-min", type=float, default=0.5, help="minimum effective bandwidth (px)")
    p.add_argument("--method", default="auto", choices=("auto", "SLSQP", "trust-constr", "L-BFGS-B"))
    p.add_argument("--centerbias-mode", choices=pipeline.CB_MODES, default="holdout")
    p.add_argument("--no-optimize", action="store_true", help="use the given fixed bandwidth as is")
    p.add_argument("--h", type=float, help="fixed bandwidth in pixels (with --no-optimize)")
    p.add_argument("--h-deg", type=float, help="fixed bandwidth in degrees of visual angle (with --no-optimize)")
    p.add_argument("--out", required=True, help="output directory")

    p = parser.subcommands["evaluate"] = sub.add_parser("evaluate", parents=[common], help="held-out log-likelihood of fitted parameters")
    _add_dataset_args(p)
    p.add_argument("--params", action="append", required=True, help="fit output directory (repeatable)")
    p.add_argument("--plan", choices=crossval.SCHEMES, default="loso")
    p.add_argument("--auc", action="store_true", help="also compute AUC of the exported density")
    p.add_argument("--bootstrap-iterations", type=int, default=10000)
    p.add_argument("--out", required=True, help="output directory")

    p = parser.subcommands["density"] = sub.add_parser("density", parents=[common], help="export locally crossvalidated or pooled densities")
    _add_dataset_args(p)
    p.add_argument("--params", required=True)
    p.add_argument("--kind", choices=("loso", "pooled"), default="loso")
    p.add_argument("--radius", type=float, help="RBF radius in pixels (default from data)")
    p.add_argument("--out", required=True)

    p = parser.subcommands["render"] = sub.add_parser("render", parents=[common], help="saturating heatmap with log-spaced contours")
    p.add_argument("--grid", required=True, help="FDG1 file or directory of .fdg files")
    p.add_argument("--stimulus", help="stimulus image, or directory of <image_id>.png/.jpg")
    p.add_argument("--saturation", "-L", type=float, default=20.0)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--opacity", type=float, default=0.75)
    p.add_argument("--colormap", default="Reds")
    p.add_argument("--panel", action="store_true", help="four-column comparison panel")
    p.add_argument("--out", required=True, help="PNG file, or directory when --grid is a directory")

    p = parser.subcommands["synth"] = sub.add_parser("synth", parents=[common], help="sample a synthetic dataset with ground truth")
    p.add_argument("--spec", help="JSON synthetic spec")
    p.add_argument("--width", type=int, default=500)
    p.add_argument("--height", type=int, default=500)
    p.add_argument("--subjects", type=int, default=16)
    p.add_argument("--per-subject", type=int, default=10)
    p.add_argument("--blob", action="append", default=[], help="x,y,sigma,weight (repeatable)")
    p.add_argument("--floor", type=float, default=None, help="uniform weight (default: 1 - blob weights)")
    p.add_argument("--n-images", type=int, default=1)
    p.add_argument("--pixels-per-degree", type=float)
    p.add_argument("--out", required=True)

    p = parser.subcommands["report"] = sub.add_parser("report", parents=[common], help="improvement quantiles and parameter extremes")
    p.add_argument("--a", action="append", required=True, help="baseline results.jsonl (repeatable, one per dataset)")
    p.add_argument("--b", action="append", required=True, help="improved results.jsonl (paired with --a)")
    p.add_argument("--label", action="append", help="dataset label per pair")
    p.add_argument("--params", help="fit directory whose parameters are ranked")
    p.add_argument("--k", type=int, default=3, help="images listed per extreme")
    p.add_argument("--out", required=True)

    p = parser.subcommands["centerbias"] = sub.add_parser("centerbias", parents=[common], help="fit and rasterize a center bias")
    _add_dataset_args(p)
    p.add_argument("--holdout", help="image to hold out (default: shared over all images)")
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True)

    p = parser.subcommands["convert-grid"] = sub.add_parser("convert-grid", parents=[common], help="plain-text row-major grid to FDG1")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return parser


def _read_config(path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {path}: {e}") from None
    if not isinstance(d, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in d.items()}


def parse_args(argv=None) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` replace defaults but never explicit flags."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if known.config:
        config = _read_config(known.config)
        for sp in parser.subcommands.values():
            dests = {a.dest: a for a in sp._actions}
            hits = {k: v for k, v in config.items() if k in dests}
            for k in hits:
                dests[k].required = False
            sp.set_defaults(**hits)
    return parser.parse_args(argv)


def _model_spec(args) -> pipeline.ModelSpec:
    comps = args.components
    if comps is None:
        comps = "kde" if args.no_optimize else "kde,cb,uniform"
    mask = mixture.parse_components(comps)
    return pipeline.ModelSpec(args.kernel, tuple(bool(m) for m in mask), args.plan, args.centerbias_mode)


def cmd_fit(args) -> int:
    dataset = _load(args)
    spec = _model_spec(args)
    extra = {"kernel": spec.kernel, "components": [c for c, a in zip(mixture.COMPONENTS, spec.active) if a], "plan": spec.scheme, "seed": args.seed}
    if args.no_optimize:
        if spec.kernel != "fixed" or list(spec.active) != [True, False, False, False]:
            raise ValidationError("--no-optimize supports only --kernel fixed with --components kde")
        if (args.h is None) == (args.h_deg is None):
            raise ValidationError("--no-optimize needs exactly one of --h or --h-deg")
        h_px = {}
        for im in dataset.images:
            h_px[im.image_id] = args.h if args.h is not None else im.degrees_to_pixels(args.h_deg)
        params = pipeline.fixed_reference_params(dataset, h_px)
        extra["fit"] = "fixed-reference"
    else:
        config = optimize.OptimConfig(restarts=args.restarts, seed=args.seed, h_min=args.h_min, method=args.method)
        pipeline.check_model_inputs(dataset, spec, _images_dir(args))
        params = pipeline.fit_dataset(dataset, spec, config, args.per_image, _images_dir(args), args.jobs)
        extra["fit"] = "per-image" if args.per_image else "global"
    pipeline.write_params_dir(params, args.out, extra)
    logger.info("wrote parameters for %d images to %s", len(params), args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset = _load(args)
    param_sets = {}
    for d in args.params:
        name = Path(d).name or str(d)
        if name in param_sets:
            name = f"{name}_{len(param_sets)}"
        param_sets[name] = pipeline.read_params_dir(d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summaries, ig_by_model = {}, {}
    for name, params in param_sets.items():
        results, summary, aucs = pipeline.evaluate_dataset(dataset, params, args.plan, _images_dir(args), args.auc)
        if args.plan == "pooled":
            summary["label"] = "pooled (not crossvalidated)"
        path = out / f"{name}.{args.plan}.jsonl"
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as f:
            for r in results:
                d = json.loads(r.to_json())
                if r.image_id in aucs:
                    d["auc"] = aucs[r.image_id]
                f.write(json.dumps(d, sort_keys=True) + "\n")
        tmp.replace(path)
        if aucs:
            summary["auc"] = float(np.mean(list(aucs.values())))
        summaries[name] = summary
        ig_by_model[name] = {r.image_id: r.ig_bits for r in results}
    report = {"plan": args.plan, "models": summaries}
    if len(ig_by_model) >= 2:
        common = sorted(set.intersection(*(set(v) for v in ig_by_model.values())))
        if len(common) >= 2:
            cis = metrics.bootstrap_ci({n: [v[i] for i in common] for n, v in ig_by_model.items()}, args.bootstrap_iterations, seed=args.seed)
            report["bootstrap_ci_bits"] = {n: {"mean": c.mean, "lo": c.lo, "hi": c.hi} for n, c in cis.items()}
    if args.plan == "pooled":
        logger.warning("pooled evaluation is not crossvalidated and overestimates consistency")
    pipeline.write_json_atomic(report, out / f"summary.{args.plan}.json")
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_density(args) -> int:
    dataset = _load(args)
    params = pipeline.read_params_dir(args.params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    for image_id in dataset.image_ids:
        if image_id not in params:
            continue
        image, table = dataset.image(image_id), dataset.fixations[image_id]
        kp, mp, comp = pipeline._model_for(dataset, image_id, params[image_id], _images_dir(args), cache)
        r = None
        if args.kind == "loso":
            config = export.LosoDensityConfig(args.radius)
            r = config.radius_for(table)
            grid = export.loso_density(image, table, kp, mp, comp, config)
        else:
            grid = export.pooled_density(image, table, kp, mp, comp)
        export.write_density(grid, out / f"{image_id}.fdg", image_id, args.kind, r, str(Path(args.params) / "params" / f"{image_id}.json"))
    return EXIT_OK


def _find_stimulus(stimulus, image_id):
    if stimulus is None:
        return None
    p = Path(stimulus)
    if p.is_dir():
        for ext in (".png", ".jpg", ".jpeg"):
            if (p / f"{image_id}{ext}").exists():
                return p / f"{image_id}{ext}"
        raise ValidationError(f"no stimulus for {image_id} in {p}")
    return p


def cmd_render(args) -> int:
    config = render.VizConfig(args.saturation, args.gamma, args.opacity, args.colormap)
    grid_path = Path(args.grid)
    if grid_path.is_dir():
        jobs = [(g, Path(args.out) / f"{g.stem}.png", g.stem) for g in sorted(grid_path.glob("*.fdg"))]
        Path(args.out).mkdir(parents=True, exist_ok=True)
    else:
        jobs = [(grid_path, Path(args.out), grid_path.stem)]
    for g, out, image_id in jobs:
        grid = read_grid(g)
        stim = _find_stimulus(args.stimulus, image_id)
        if stim is None:
            stim = np.full((grid.height, grid.width, 3), 128, dtype=np.uint8)
        fig = render.render_panel(stim, grid, config) if args.panel else render.render_overlay(stim, grid, config)
        tmp = out.with_name(out.name + ".tmp")
        fig.save(tmp)
        tmp.replace(out)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.spec:
        d = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        d.setdefault("seed", args.seed)
        spec = synth.SyntheticSpec.from_dict(d)
    else:
        blobs = []
        for b in args.blob:
            try:
                x, y, s, w = (float(v) for v in b.split(","))
            except ValueError:
                raise ValidationError(f"--blob expects x,y,sigma,weight, got {b!r}") from None
            blobs.append(synth.Blob(x, y, s, w))
        floor = args.floor if args.floor is not None else 1.0 - sum(b.weight for b in blobs)
        spec = synth.SyntheticSpec(args.width, args.height, args.subjects, args.per_subject, tuple(blobs), floor, args.seed, args.n_images, args.pixels_per_degree)
    ds = synth.synthesize(spec)
    synth.write_synthetic(ds, args.out)
    return EXIT_OK


def _records(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(metrics.MetricRecord(d["image_id"], d["ig_bits"], d.get("auc", math.nan), d["n_fixations"]))
    return out


def cmd_report(args) -> int:
    if len(args.a) != len(args.b):
        raise ValidationError("--a and --b must be given the same number of times")
    labels = args.label or [f"dataset{i}" for i in range(len(args.a))]
    if len(labels) != len(args.a):
        raise ValidationError("one --label per --a/--b pair")
    tables = {lab: metrics.improvement_quantiles(_records(a), _records(b)) for lab, a, b in zip(labels, args.a, args.b)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_quantile_csv(tables, out / "improvement_quantiles.csv")
    if args.params:
        extremes = pipeline.parameter_extremes(pipeline.read_params_dir(args.params), args.k)
        pipeline.write_json_atomic(extremes, out / "parameter_extremes.json")
    return EXIT_OK


def cmd_centerbias(args) -> int:
    dataset = _load(args)
    if args.holdout:
        model = mixture.fit_center_bias(dataset, args.holdout)
    else:
        model = mixture.fit_shared_center_bias(dataset)
    grid = model.rasterize((args.width, args.height))
    write_grid(grid, args.out)
    print(json.dumps({"bandwidth": model.bandwidth, "crossvalidated": model.crossvalidated}))
    return EXIT_OK


def cmd_convert_grid(args) -> int:
    grid: DensityGrid = read_text_grid(args.input)
    write_grid(grid, args.out)
    return EXIT_OK


COMMANDS = {
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "density": cmd_density,
    "render": cmd_render,
    "synth": cmd_synth,
    "report": cmd_report,
    "centerbias": cmd_centerbias,
    "convert-grid": cmd_convert_grid,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as e:
        # usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (optimize.OptimizationError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"computation failed: {e}", file=sys.stderr)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())
