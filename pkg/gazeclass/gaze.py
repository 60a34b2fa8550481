"""Gaze ingestion, Human Fixation Maps, resizing and the 10-variant augmentation."""

import json
import logging
from dataclasses import dataclass, field
from math import ceil
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.ndimage import convolve1d

from . import ASD, CLASS_NAMES, N_VARIANTS, TD, netpbm
from .errors import DatasetError, GazeFormatError, ShapeMismatchError

logger = logging.getLogger(__name__)

GAZE_COLUMNS = ["subject_id", "image_id", "t_ms", "x_px", "y_px"]
RESIZE_SIZE = 256
CROP_SIZE = 224
DATASET_FORMAT = "gazeclass-dataset/1"


# --- DOMAIN TYPES ---


@dataclass
class GazeSeries:
    subject_id: str
    image_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass
class FixationMap:
    width: int
    height: int
    values: np.ndarray
    raw_total: float
    discarded: int = 0
    sigma_px: float = 0.0
    subject_id: str = ""
    image_id: str = ""


@dataclass
class StimulusImage:
    image_id: str
    pixels: np.ndarray

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DatasetError(f"image {self.image_id} must have 3 channels, got {self.pixels.shape}")
        if min(self.pixels.shape[:2]) < 1:
            raise DatasetError(f"image {self.image_id} has empty dimensions")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass
class SubjectRecord:
    subject_id: str
    label: int
    maps: dict = field(default_factory=dict)


@dataclass
class CohortDataset:
    image_ids: list
    images: dict
    subjects: dict

    def __post_init__(self):
        for sid, record in self.subjects.items():
            missing = [i for i in self.image_ids if i not in record.maps]
            if missing:
                raise DatasetError(f"subject {sid} has no fixation map for {missing[:5]}")
        labels = {record.label for record in self.subjects.values()}
        if labels != {TD, ASD}:
            raise DatasetError("cohort must contain both TD and ASD subjects")

    @property
    def subject_ids(self):
        return list(self.subjects)

    def labels(self):
        return {sid: record.label for sid, record in self.subjects.items()}


# --- INGESTION ---


def parse_gaze_csv(path):
    """Read a gaze CSV into time-sorted series keyed by ``(subject_id, image_id)``.

    Fields are plain comma-separated values without quoting. Blank lines are
    skipped but still counted, so reported line numbers match the file.
    """
    raw = pd.Series(Path(path).read_text().splitlines(), dtype=object)
    raw.index = pd.RangeIndex(1, len(raw) + 1)
    if not (raw.str.strip() != "").any():
        raise GazeFormatError(f"{path}: empty file")
    header = [name.strip() for name in raw.iloc[0].lstrip("\ufeff").split(",")]
    if header != GAZE_COLUMNS:
        raise GazeFormatError(f"{path}: missing header {','.join(GAZE_COLUMNS)}", lines=[1])
    body = raw.iloc[1:]
    body = body[body.str.strip() != ""]
    if body.empty:
        raise GazeFormatError(f"{path}: empty file")

    n_fields = body.str.count(",") + 1
    df = body.str.split(",", expand=True).reindex(columns=range(len(GAZE_COLUMNS))).fillna("")
    df = df.apply(lambda column: column.astype(str).str.strip()).set_axis(GAZE_COLUMNS, axis=1)
    numeric = df[["t_ms", "x_px", "y_px"]].apply(pd.to_numeric, errors="coerce")
    bad = (n_fields != len(GAZE_COLUMNS)).to_numpy()
    bad |= ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    bad |= (df["subject_id"] == "").to_numpy()
    bad |= (df["image_id"] == "").to_numpy()
    if bad.any():
        raise GazeFormatError(f"{path}: malformed rows", lines=body.index[bad].tolist())

    df = df[["subject_id", "image_id"]].assign(**numeric)
    df = df.sort_values(["subject_id", "image_id", "t_ms"], kind="mergesort")
    series = {}
    for (subject_id, image_id), group in df.groupby(["subject_id", "image_id"], sort=True):
        series[(subject_id, image_id)] = GazeSeries(
            subject_id=subject_id,
            image_id=image_id,
            t=group["t_ms"].to_numpy(dtype=float),
            x=group["x_px"].to_numpy(dtype=float),
            y=group["y_px"].to_numpy(dtype=float),
        )
    logger.info("parsed %d gaze rows into %d series from %s", len(df), len(series), path)
    return series


def write_gaze_csv(path, series):
    frames = [
        pd.DataFrame({
            "subject_id": s.subject_id,
            "image_id": s.image_id,
            "t_ms": s.t,
            "x_px": s.x,
            "y_px": s.y,
        })
        for s in series
    ]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=GAZE_COLUMNS)
    df.to_csv(path, index=False, lineterminator="\n")


# --- FIXATION MAPS ---


def gaussian_kernel1d(sigma_px):
    """Gaussian taps truncated at radius ceil(3 sigma), renormalized to sum 1."""
    if sigma_px <= 0:
        raise ValueError(f"sigma_px must be > 0, got {sigma_px}")
    radius = ceil(3 * sigma_px)
    r = np.arange(-radius, radius + 1, dtype=float)
    taps = np.exp(-(r**2) / (2.0 * sigma_px**2))
    return taps / taps.sum()


def _sample_xy(samples):
    if samples is None:
        return np.empty(0), np.empty(0)
    if isinstance(samples, GazeSeries):
        return np.asarray(samples.x, float), np.asarray(samples.y, float)
    arr = np.asarray(samples, dtype=float).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def smoothed_dwell(samples, width, height, sample_rate_hz=300.0, sigma_px=24.0):
    """Dwell-time grid in ms before normalization.

    Returns ``(grid, raw_total_ms, n_in_bounds, n_discarded)``.
    """
    if width <= 0 or height <= 0:
        raise ValueError("width and height must be positive")
    kernel = gaussian_kernel1d(sigma_px)
    x, y = _sample_xy(samples)
    inside = (x >= 0) & (x < width) & (y >= 0) & (y < height)
    cols = np.minimum(np.floor(x[inside] + 0.5).astype(int), width - 1)
    rows = np.minimum(np.floor(y[inside] + 0.5).astype(int), height - 1)
    counts = np.zeros((height, width), dtype=np.int64)
    np.add.at(counts, (rows, cols), 1)
    dwell = 1000.0 / sample_rate_hz
    grid = counts * dwell
    grid = convolve1d(grid, kernel, axis=0, mode="constant", cval=0.0)
    grid = convolve1d(grid, kernel, axis=1, mode="constant", cval=0.0)
    n_in = int(inside.sum())
    return grid, n_in * dwell, n_in, int((~inside).sum())


def build_hfm(samples, width, height, sample_rate_hz=300.0, sigma_px=24.0):
    """Smoothed dwell map divided by its maximum, so values lie in [0, 1]."""
    grid, raw_total, _, discarded = smoothed_dwell(samples, width, height, sample_rate_hz, sigma_px)
    peak = grid.max()
    if peak > 0:
        grid = grid / peak
    else:
        grid = np.zeros_like(grid)
    fmap = FixationMap(
        width=width,
        height=height,
        values=grid,
        raw_total=raw_total,
        discarded=discarded,
        sigma_px=sigma_px,
    )
    if isinstance(samples, GazeSeries):
        fmap.subject_id, fmap.image_id = samples.subject_id, samples.image_id
    return fmap


def save_fixation_map(fmap, out_dir):
    """Write ``<subject>__<image>.pgm`` (16-bit) and a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{fmap.subject_id}__{fmap.image_id}"
    netpbm.write(out_dir / f"{stem}.pgm", np.round(65535 * fmap.values).astype(np.uint16))
    sidecar = {
        "subject_id": fmap.subject_id,
        "image_id": fmap.image_id,
        "raw_total_ms": fmap.raw_total,
        "sigma_px": fmap.sigma_px,
    }
    (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return out_dir / f"{stem}.pgm"


def load_fixation_map(pgm_path):
    pgm_path = Path(pgm_path)
    meta = json.loads(pgm_path.with_suffix(".json").read_text())
    values = netpbm.read(pgm_path).astype(float) / 65535.0
    return FixationMap(
        width=values.shape[1],
        height=values.shape[0],
        values=values,
        raw_total=meta["raw_total_ms"],
        sigma_px=meta["sigma_px"],
        subject_id=meta["subject_id"],
        image_id=meta["image_id"],
    )


# --- RESIZE AND AUGMENTATION ---


def _source_coords(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(grid, out_w=RESIZE_SIZE, out_h=RESIZE_SIZE):
    """Bilinear resize of an ``(H, W)`` or ``(H, W, C)`` grid; aspect ratio is not kept."""
    grid = np.asarray(grid, dtype=float)
    if grid.shape[0] < 2 or grid.shape[1] < 2:
        raise ValueError(f"resize needs at least a 2x2 grid, got {grid.shape[:2]}")
    r0, r1, fr = _source_coords(grid.shape[0], out_h)
    c0, c1, fc = _source_coords(grid.shape[1], out_w)
    top, bottom = grid[r0], grid[r1]
    rows = top + (bottom - top) * fr.reshape((-1,) + (1,) * (grid.ndim - 1))
    left, right = rows[:, c0], rows[:, c1]
    return left + (right - left) * fc.reshape((1, -1) + (1,) * (grid.ndim - 2))


def crop_offsets(size=RESIZE_SIZE, crop=CROP_SIZE):
    """Top-left corners: four corners then the center."""
    m = size - crop
    return ((0, 0), (0, m), (m, 0), (m, m), (m // 2, m // 2))


def crop_five(grid, size=RESIZE_SIZE, crop=CROP_SIZE):
    grid = np.asarray(grid)
    if grid.shape[:2] != (size, size) or crop > size:
        raise ShapeMismatchError(f"crop_five expects a {size}x{size} grid, got {grid.shape[:2]}")
    return [grid[r : r + crop, c : c + crop].copy() for r, c in crop_offsets(size, crop)]


def hflip(grid):
    return np.asarray(grid)[:, ::-1].copy()


def augment10(grid, size=RESIZE_SIZE, crop=CROP_SIZE):
    """Crops 0-4 followed by their mirror images."""
    crops = crop_five(grid, size, crop)
    return crops + [hflip(c) for c in crops]


def augment_variant(grid, variant, size=RESIZE_SIZE, crop=CROP_SIZE):
    """One entry of ``augment10`` without building the other nine."""
    if not 0 <= variant < N_VARIANTS:
        raise ValueError(f"variant must be in 0..{N_VARIANTS - 1}, got {variant}")
    grid = np.asarray(grid)
    if grid.shape[:2] != (size, size):
        raise ShapeMismatchError(f"expected a {size}x{size} grid, got {grid.shape[:2]}")
    r, c = crop_offsets(size, crop)[variant % 5]
    out = grid[r : r + crop, c : c + crop]
    return hflip(out) if variant >= 5 else out.copy()


# --- NETWORK INPUTS ---


def image_input(pixels):
    """``(H, W, 3)`` 8-bit scale pixels to a ``(3, H, W)`` array in [0, 1]."""
    return np.transpose(np.asarray(pixels, dtype=float) / 255.0, (2, 0, 1))


def hfm_input(grid):
    """A 1-channel map replicated to 3 channels, ``(3, H, W)``."""
    return np.repeat(np.asarray(grid, dtype=float)[None], 3, axis=0)


def stream_inputs(grids256, variant, stream, size=RESIZE_SIZE, crop=CROP_SIZE, dtype=np.float32):
    """Stack the augmented ``variant`` of every resized grid into ``(N, 3, crop, crop)``."""
    convert = image_input if stream == "image" else hfm_input
    batch = [convert(augment_variant(g, variant, size, crop)) for g in grids256]
    return np.stack(batch).astype(dtype)


# --- DATASET DIRECTORIES ---


def write_dataset(out_dir, images, series, labels, meta=None):
    """Write ``images/*.ppm``, ``gaze.csv`` and ``manifest.json``.

    ``images`` maps image id to StimulusImage in canonical order, ``labels``
    maps subject id to class index.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for image_id, image in images.items():
        netpbm.write(out_dir / "images" / f"{image_id}.ppm", image.pixels.astype(np.uint8))
    write_gaze_csv(out_dir / "gaze.csv", series)
    first = next(iter(images.values()))
    manifest = {
        "format": DATASET_FORMAT,
        "image_ids": list(images),
        "image_size": [first.width, first.height],
        "subjects": [{"subject_id": sid, "label": CLASS_NAMES[lab]} for sid, lab in labels.items()],
        "fixation_sources": [{"subject_id": s.subject_id, "image_id": s.image_id} for s in series],
        **(meta or {}),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir


def read_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"no manifest.json in {data_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise DatasetError(f"{path}: unsupported dataset format {manifest.get('format')!r}")
    return manifest


def load_images(data_dir, image_ids):
    """Read ``images/<id>.ppm`` (or ``.pgm`` for grayscale stimuli) as 3-channel pixels."""
    images = {}
    for image_id in image_ids:
        path = Path(data_dir) / "images" / f"{image_id}.ppm"
        if not path.is_file() and path.with_suffix(".pgm").is_file():
            path = path.with_suffix(".pgm")
        pixels = netpbm.read(path)
        if pixels.ndim == 2:
            pixels = np.repeat(pixels[..., None], 3, axis=2)
        images[image_id] = StimulusImage(image_id, pixels)
    return images


def load_dataset(data_dir, sample_rate_hz=300.0, sigma_px=24.0):
    """Read a dataset directory and build every subject's fixation maps."""
    manifest = read_manifest(data_dir)
    image_ids = manifest["image_ids"]
    images = load_images(data_dir, image_ids)
    series = parse_gaze_csv(Path(data_dir) / "gaze.csv")
    subjects, discarded = {}, 0
    for entry in manifest["subjects"]:
        sid = entry["subject_id"]
        if entry["label"] not in CLASS_NAMES:
            raise DatasetError(f"subject {sid} has unknown label {entry['label']!r}")
        record = SubjectRecord(sid, CLASS_NAMES.index(entry["label"]))
        for image_id in image_ids:
            img = images[image_id]
            samples = series.get((sid, image_id))
            fmap = build_hfm(samples, img.width, img.height, sample_rate_hz, sigma_px)
            fmap.subject_id, fmap.image_id = sid, image_id
            discarded += fmap.discarded
            record.maps[image_id] = fmap
        subjects[sid] = record
    logger.info(
        "loaded %d subjects x %d images from %s (%d out-of-bounds samples discarded)",
        len(subjects), len(image_ids), data_dir, discarded,
    )
    return CohortDataset(image_ids=image_ids, images=images, subjects=subjects)
