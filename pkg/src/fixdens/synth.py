"""Synthetic fixation data drawn from known densities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from fixdens import kde
from fixdens.data import DatasetBundle, DensityGrid, FixationTable, ImageRecord, ValidationError, write_fixation_csv, write_grid, write_images_json


@dataclass(frozen=True)
class Blob:
    x: float
    y: float
    sigma: float
    weight: float


@dataclass(frozen=True)
class SyntheticSpec:
    """Mixture of isotropic Gaussian blobs (truncated to the image) plus a uniform floor."""

    width: int = 500
    height: int = 500
    n_subjects: int = 16
    fixations_per_subject: int = 10
    blobs: tuple[Blob, ...] = ()
    floor: float = 0.0
    seed: int = 0
    n_images: int = 1
    pixels_per_degree: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "blobs", tuple(b if isinstance(b, Blob) else Blob(**b) for b in self.blobs))
        total = self.floor + sum(b.weight for b in self.blobs)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"blob weights plus floor sum to {total}, not 1")
        if self.floor < 0 or any(b.weight < 0 for b in self.blobs):
            raise ValidationError("weights must be nonnegative")
        if any(not b.sigma > 0 for b in self.blobs):
            raise ValidationError("blob sigma must be > 0")
        if self.n_subjects < 1 or self.fixations_per_subject < 1 or self.n_images < 1:
            raise ValidationError("counts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        d["blobs"] = tuple(Blob(**b) for b in d.get("blobs", ()))
        return cls(**d)

    @property
    def size(self):
        return (self.width, self.height)

    def logdensity(self, queries) -> np.ndarray:
        """Exact ground-truth log density per square pixel."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 2)
        terms = [np.full(len(q), math.log(self.floor) - math.log(self.width * self.height))] if self.floor > 0 else []
        for b in self.blobs:
            if b.weight > 0:
                terms.append(math.log(b.weight) + kde.fixed_kde_logdensity([[b.x, b.y]], q, b.sigma, self.size))
        return logsumexp(np.stack(terms), axis=0)

    def raster(self) -> DensityGrid:
        total = np.full((self.height, self.width), self.floor / (self.width * self.height))
        for b in self.blobs:
            if b.weight > 0:
                total += b.weight * kde.kde_raster([[b.x, b.y]], b.sigma, self.size)
        return DensityGrid.normalized(total)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        weights = np.array([self.floor] + [b.weight for b in self.blobs])
        comp = rng.choice(len(weights), size=n, p=weights / weights.sum())
        out = np.empty((n, 2))
        for i, c in enumerate(comp):
            if c == 0:
                out[i] = rng.uniform(0, 1, 2) * (self.width, self.height)
                continue
            b = self.blobs[c - 1]
            while True:
                p = rng.normal((b.x, b.y), b.sigma)
                if 0 <= p[0] < self.width and 0 <= p[1] < self.height:
                    out[i] = p
                    break
        return out

    def sample_table(self, image_id: str, rng: np.random.Generator) -> FixationTable:
        n = self.n_subjects * self.fixations_per_subject
        subjects = np.repeat([f"s{k:02d}" for k in range(self.n_subjects)], self.fixations_per_subject)
        return FixationTable(image_id, subjects, self.sample(rng, n))


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass(frozen=True)
class SyntheticDataset:
    bundle: DatasetBundle
    specs: dict[str, SyntheticSpec] = field(default_factory=dict)


def synthesize(specs, prefix: str = "img") -> SyntheticDataset:
    """One image per spec (or ``spec.n_images`` images for a single spec)."""
    if isinstance(specs, SyntheticSpec):
        specs = [specs] * specs.n_images
    images, tables, by_id = [], {}, {}
    for k, spec in enumerate(specs):
        image_id = f"{prefix}{k:03d}"
        images.append(ImageRecord(image_id, spec.width, spec.height, spec.pixels_per_degree))
        tables[image_id] = spec.sample_table(image_id, image_rng(spec.seed, k))
        by_id[image_id] = spec
    return SyntheticDataset(DatasetBundle(tuple(images), tables), by_id)


def write_synthetic(ds: SyntheticDataset, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "truth").mkdir(exist_ok=True)
    write_fixation_csv(ds.bundle, outdir / "fixations.csv")
    write_images_json(ds.bundle.images, outdir / "images.json")
    for image_id, spec in ds.specs.items():
        write_grid(spec.raster(), outdir / "truth" / f"{image_id}.fdg")
    return {"fixations": outdir / "fixations.csv", "images": outdir / "images.json", "truth": outdir / "truth"}


def single_blob_spec(seed: int = 0, sigma: float = 20.0, size: int = 500, n_subjects: int = 16, per_subject: int = 10) -> SyntheticSpec:
    """Isotropic blob at the image center."""
    c = size / 2
    return SyntheticSpec(size, size, n_subjects, per_subject, (Blob(c, c, sigma, 1.0),), 0.0, seed)


def multiscale_spec(rng: np.random.Generator, seed: int, size: int = 500, cluster_sigma: float = 3.0) -> SyntheticSpec:
    """A tight cluster plus dispersed background structure."""
    cx, cy = rng.uniform(0.2, 0.8, 2) * size
    bx, by = rng.uniform(0.3, 0.7, 2) * size
    return SyntheticSpec(
        size,
        size,
        16,
        10,
        (Blob(cx, cy, cluster_sigma, 0.5), Blob(bx, by, size / 6, 0.4)),
        0.1,
        seed,
    )
