"""Dataset ingestion, validation and the portable density grid."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

GRID_MAGIC = b"FDG1"
_HEADER = struct.Struct("<4sIIB")
SPACE_TAGS = {"probability": 0, "log-probability": 1}

NORMALIZATION_TOL = 1e-6


class ValidationError(ValueError):
    """Input data violates a documented format or invariant."""


class GridFormatError(ValidationError):
    """Malformed or inconsistent FDG1 grid file."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    pixels_per_degree: float | None = None
    saliency_grid_path: str | None = None

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValidationError(f"image {self.image_id!r}: width and height must be >= 1")
        if self.pixels_per_degree is not None and not self.pixels_per_degree > 0:
            raise ValidationError(f"image {self.image_id!r}: pixels_per_degree must be > 0")

    @property
    def size(self) -> tuple[int, int]:
        return (self.width, self.height)

    @property
    def log_uniform(self) -> float:
        """Natural log of the uniform density 1/(W*H)."""
        return -math.log(self.width * self.height)

    def degrees_to_pixels(self, degrees: float) -> float:
        if self.pixels_per_degree is None:
            raise ValidationError(f"image {self.image_id!r} has no pixels_per_degree")
        return degrees * self.pixels_per_degree


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FixationTable:
    """Fixations on one image.

    Coordinates are continuous pixels, origin at the top-left pixel corner,
    x rightward and y downward; pixel (i, j) has its center at (i+0.5, j+0.5).
    """

    image_id: str
    subjects: np.ndarray  # (N,) str
    xy: np.ndarray  # (N, 2) float64

    def __post_init__(self):
        subjects = np.asarray(self.subjects, dtype=str)
        xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if len(subjects) != len(xy):
            raise ValidationError("subjects and coordinates differ in length")
        object.__setattr__(self, "subjects", _frozen(subjects.copy()))
        object.__setattr__(self, "xy", _frozen(xy.copy()))

    @classmethod
    def from_rows(cls, image_id: str, rows: Iterable[tuple[str, float, float]]) -> FixationTable:
        rows = list(rows)
        subjects = [str(r[0]) for r in rows]
        xy = np.array([[r[1], r[2]] for r in rows], dtype=np.float64).reshape(-1, 2)
        return cls(image_id, np.array(subjects, dtype=str), xy)

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def subject_ids(self) -> list[str]:
        return sorted(set(self.subjects.tolist()))

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def crossvalidatable(self) -> bool:
        return self.n_subjects >= 2

    def check_bounds(self, image: ImageRecord) -> None:
        if len(self) == 0:
            return
        x, y = self.xy[:, 0], self.xy[:, 1]
        ok = np.isfinite(self.xy).all(axis=1) & (x >= 0) & (x < image.width) & (y >= 0) & (y < image.height)
        if not ok.all():
            i = int(np.flatnonzero(~ok)[0])
            raise ValidationError(
                f"image {self.image_id!r}: fixation {i} at ({x[i]}, {y[i]}) outside "
                f"{image.width}x{image.height}"
            )

    def subset(self, index) -> FixationTable:
        return FixationTable(self.image_id, self.subjects[index], self.xy[index])


@dataclass(frozen=True)
class DatasetBundle:
    images: tuple[ImageRecord, ...]
    fixations: Mapping[str, FixationTable]
    exclusion_list: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        images = tuple(im for im in self.images if im.image_id not in self.exclusion_list)
        ids = [im.image_id for im in images]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate image_id in image metadata")
        known = set(ids)
        fixations = {}
        for image_id, table in self.fixations.items():
            if image_id in self.exclusion_list:
                continue
            if image_id not in known:
                raise ValidationError(f"fixations reference unknown image {image_id!r}")
            fixations[image_id] = table
        for im in images:
            fixations.setdefault(im.image_id, FixationTable(im.image_id, np.array([], dtype=str), np.zeros((0, 2))))
            fixations[im.image_id].check_bounds(im)
        object.__setattr__(self, "images", tuple(sorted(images, key=lambda im: im.image_id)))
        object.__setattr__(self, "fixations", dict(sorted(fixations.items())))
        object.__setattr__(self, "exclusion_list", frozenset(self.exclusion_list))

    def __len__(self) -> int:
        return len(self.images)

    def image(self, image_id: str) -> ImageRecord:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    @property
    def image_ids(self) -> list[str]:
        return [im.image_id for im in self.images]

    @property
    def subject_counts(self) -> dict[str, int]:
        return {k: t.n_subjects for k, t in self.fixations.items()}

    @property
    def crossvalidatable_ids(self) -> list[str]:
        return [k for k, t in self.fixations.items() if t.crossvalidatable]


def read_exclusion_list(path) -> frozenset[str]:
    """Plain text, one image_id per line; blank lines and '#' comments ignored."""
    ids = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            ids.add(line)
    return frozenset(ids)


def read_images_json(path) -> list[ImageRecord]:
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(entries, list):
        raise ValidationError(f"{path}: expected a JSON array of image objects")
    images = []
    for k, entry in enumerate(entries):
        try:
            images.append(
                ImageRecord(
                    image_id=str(entry["image_id"]),
                    width=int(entry["width"]),
                    height=int(entry["height"]),
                    pixels_per_degree=(
                        float(entry["pixels_per_degree"]) if entry.get("pixels_per_degree") is not None else None
                    ),
                    saliency_grid_path=entry.get("saliency_grid_path"),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"{path}: image entry {k} is malformed ({e})") from None
    return images


def read_fixation_csv(path) -> dict[str, list[tuple[str, float, float]]]:
    rows: dict[str, list[tuple[str, float, float]]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image_id", "subject_id", "x", "y"]:
            raise ValidationError(f"{path}:1: expected header image_id,subject_id,x,y")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValidationError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            image_id, subject_id = row[0].strip(), row[1].strip()
            try:
                x, y = float(row[2]), float(row[3])
            except ValueError:
                raise ValidationError(f"{path}:{line}: non-numeric coordinate") from None
            if not (math.isfinite(x) and math.isfinite(y)) or not image_id or not subject_id:
                raise ValidationError(f"{path}:{line}: malformed row")
            rows.setdefault(image_id, []).append((subject_id, x, y))
    return rows


def load_dataset(fixation_csv_path, images_json_path, exclusion_list=None) -> DatasetBundle:
    """Load and validate a dataset.

    ``exclusion_list`` is either a path to a plain-text list or an iterable
    of image ids. Excluded images are dropped before any validation of their
    fixations.
    """
    if exclusion_list is None:
        excluded = frozenset()
    elif isinstance(exclusion_list, (str, Path)):
        excluded = read_exclusion_list(exclusion_list)
    else:
        excluded = frozenset(exclusion_list)
    images = read_images_json(images_json_path)
    rows = read_fixation_csv(fixation_csv_path)
    tables = {
        image_id: FixationTable.from_rows(image_id, r) for image_id, r in rows.items() if image_id not in excluded
    }
    bundle = DatasetBundle(tuple(images), tables, excluded)
    for image_id, table in bundle.fixations.items():
        if not table.crossvalidatable:
            logger.warning("image %r has %d subject(s); not crossvalidatable", image_id, table.n_subjects)
    return bundle


def write_fixation_csv(bundle: DatasetBundle, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["image_id", "subject_id", "x", "y"])
        for image_id, table in bundle.fixations.items():
            for s, (x, y) in zip(table.subjects.tolist(), table.xy.tolist()):
                w.writerow([image_id, s, repr(x), repr(y)])


def write_images_json(images: Iterable[ImageRecord], path) -> None:
    out = []
    for im in images:
        entry = {"image_id": im.image_id, "width": im.width, "height": im.height}
        if im.pixels_per_degree is not None:
            entry["pixels_per_degree"] = im.pixels_per_degree
        if im.saliency_grid_path is not None:
            entry["saliency_grid_path"] = im.saliency_grid_path
        out.append(entry)
    Path(path).write_text(json.dumps(out, indent=1) + "\n", encoding="utf-8")


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """A W x H density on pixel centers, stored row-major as (H, W)."""

    values: np.ndarray
    space: str = "probability"

    def __post_init__(self):
        if self.space not in SPACE_TAGS:
            raise ValidationError(f"unknown grid space {self.space!r}")
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise ValidationError("grid values must be a non-empty 2-d array")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def normalized(cls, values) -> DensityGrid:
        """Probability grid from nonnegative values, rescaled to sum to 1."""
        v = np.asarray(values, dtype=np.float64)
        total = v.sum()
        if not np.isfinite(total) or total <= 0 or (v < 0).any():
            raise ValidationError("cannot normalize: values must be nonnegative with positive finite sum")
        return cls(v / total)

    def check(self, tol: float = NORMALIZATION_TOL) -> None:
        v = self.values
        # log space may hold -inf (zero probability); nothing else non-finite
        if np.isnan(v).any() or (v == np.inf).any() or (self.space == "probability" and not np.isfinite(v).all()):
            raise ValidationError("grid contains non-finite values")
        if self.space == "probability":
            if (v < 0).any():
                raise ValidationError("probability grid has negative values")
            if abs(v.sum() - 1.0) > tol:
                raise ValidationError(f"probability grid sums to {v.sum()!r}, not 1")
        else:
            m = v.max()
            lse = m + math.log(np.exp(v - m).sum())
            if abs(lse) > tol:
                raise ValidationError(f"log-probability grid has log-sum-exp {lse!r}, not 0")

    def to_probability(self) -> DensityGrid:
        if self.space == "probability":
            return self
        return DensityGrid(np.exp(self.values), "probability")

    def to_log(self) -> DensityGrid:
        if self.space == "log-probability":
            return self
        with np.errstate(divide="ignore"):
            return DensityGrid(np.log(self.values), "log-probability")


def write_grid(grid: DensityGrid, path) -> None:
    grid.check()
    header = _HEADER.pack(GRID_MAGIC, grid.width, grid.height, SPACE_TAGS[grid.space])
    payload = np.ascontiguousarray(grid.values, dtype="<f8").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + payload)
    tmp.replace(path)


def read_grid(path) -> DensityGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise GridFormatError(f"{path}: truncated header")
    magic, width, height, tag = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"{path}: bad magic {magic!r}")
    spaces = {v: k for k, v in SPACE_TAGS.items()}
    if tag not in spaces:
        raise GridFormatError(f"{path}: unknown space tag {tag}")
    payload = data[_HEADER.size:]
    if width == 0 or height == 0 or len(payload) != 8 * width * height:
        raise GridFormatError(
            f"{path}: header claims {width}x{height} but payload holds {len(payload) / 8:g} values"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(height, width).astype(np.float64)
    space = spaces[tag]
    if np.isnan(values).any() or (space == "probability" and not np.isfinite(values).all()):
        raise GridFormatError(f"{path}: non-finite values")
    if space == "log-probability" and (values == np.inf).any():
        raise GridFormatError(f"{path}: non-finite values")
    return DensityGrid(values, space)


def read_text_grid(path) -> DensityGrid:
    """Plain-text row-major grid (whitespace separated, one row per line), normalized."""
    values = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return DensityGrid.normalized(values)
