"""Synthetic shape data, digit rasters, IDX ingestion, and target synthesis.

Every generator draws from a per-sample RNG substream derived from
(seed, sample index), so samples are reproducible independently of batch
size or generation order.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.special import ellipe
from skimage import measure

from .image import (
    BoundaryMode,
    Image,
    conv_same,
    gaussian_derivative_kernel,
    read_lonr,
    write_lonr,
)


class IdxFormatError(ValueError):
    """IDX parse failure; message reports the byte offset."""


_STREAMS = {"init": 0, "data_order": 1, "dataset": 2, "noise": 3, "scale": 4}


def named_stream(seed: int, name: str) -> np.random.Generator:
    """One of the harness' fixed RNG streams, independent per name."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STREAMS[name],)))


def sample_stream(seed: int, index: int, name: str = "dataset") -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_STREAMS[name], index))
    )


@dataclass(frozen=True)
class ShapeSample:
    image: Image
    area: float
    perimeter: float
    class_label: int | None = None
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class GradSample:
    input: Image
    target: Image
    scale_factor: float


# --- labels -----------------------------------------------------------------


def label_shapes(mask: Image) -> tuple[float, float]:
    """(area, perimeter) of a binary mask.

    Area is the foreground pixel count; perimeter is the summed segment
    length of the marching-squares contour at the 0.5 iso-level.
    """
    fg = mask.data > 0.5
    area = float(fg.sum())
    if area == 0:
        raise ValueError("empty mask has no shape to label")
    perimeter = 0.0
    for contour in measure.find_contours(fg.astype(np.float64), 0.5):
        seg = np.diff(contour, axis=0)
        perimeter += float(np.hypot(seg[:, 0], seg[:, 1]).sum())
    return area, perimeter


def assign_classes(samples: list[ShapeSample], key: str) -> list[ShapeSample]:
    """Tertile split into small/medium/large on area or perimeter.

    Label is a function of the key's rank (ties broken by sample index);
    class sizes differ by at most one, with remainders going to the lower
    classes.
    """
    if key not in ("area", "perimeter"):
        raise ValueError(f"key must be 'area' or 'perimeter', got {key!r}")
    n = len(samples)
    if n < 3:
        raise ValueError("tertile split needs at least 3 samples")
    values = np.array([getattr(s, key) for s in samples])
    order = np.argsort(values, kind="stable")
    base, rem = divmod(n, 3)
    sizes = [base + (1 if c < rem else 0) for c in range(3)]
    labels = np.empty(n, dtype=int)
    start = 0
    for c, size in enumerate(sizes):
        labels[order[start : start + size]] = c
        start += size
    return [replace(s, class_label=int(lab)) for s, lab in zip(samples, labels)]


def add_noise(sample: ShapeSample, sigma: float, rng: np.random.Generator) -> ShapeSample:
    """Add iid zero-mean Gaussian noise; labels are untouched."""
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return sample
    noisy = Image(sample.image.data + rng.normal(0.0, sigma, size=sample.image.data.shape))
    return replace(sample, image=noisy, noise_sigma=sigma)


# --- blob pipeline ----------------------------------------------------------

CROP = 128
AREA_BOUNDS = (300.0, 8000.0)
_EIGHT = np.ones((3, 3), dtype=int)


def _center_crop(rows, cols) -> Image | None:
    h = rows.max() - rows.min() + 1
    w = cols.max() - cols.min() + 1
    if h > CROP - 8 or w > CROP - 8:
        return None
    out = np.zeros((CROP, CROP))
    r0 = (CROP - h) // 2
    c0 = (CROP - w) // 2
    out[rows - rows.min() + r0, cols - cols.min() + c0] = 1.0
    return Image(out)


def generate_blobs(seed: int, count: int) -> list[ShapeSample]:
    """Random blob masks from thresholded smoothed noise.

    One 512x512 standard-normal field per attempt, smoothed at scale 10 and
    binarized at its 75th intensity percentile; 8-connected components that
    avoid the border and land inside the area bounds are centered into
    128x128 masks.  Fields are consumed until enough shapes survive.
    """
    if count < 1:
        raise ValueError("count must be positive")
    samples: list[ShapeSample] = []
    attempt = 0
    while len(samples) < count:
        rng = sample_stream(seed, attempt)
        field = ndimage.gaussian_filter(rng.normal(size=(512, 512)), sigma=10.0)
        binary = field > np.quantile(field, 0.75)
        labeled, n_comp = ndimage.label(binary, structure=_EIGHT)
        for comp in range(1, n_comp + 1):
            rows, cols = np.nonzero(labeled == comp)
            if rows.min() == 0 or cols.min() == 0 or rows.max() == 511 or cols.max() == 511:
                continue
            if not AREA_BOUNDS[0] <= rows.size <= AREA_BOUNDS[1]:
                continue
            img = _center_crop(rows, cols)
            if img is None:
                continue
            area, perimeter = label_shapes(img)
            samples.append(ShapeSample(img, area, perimeter))
            if len(samples) == count:
                break
        attempt += 1
    return samples


# --- ellipse families -------------------------------------------------------


@dataclass(frozen=True)
class ConstantArea:
    value: float  # pixels^2


@dataclass(frozen=True)
class ConstantPerimeter:
    value: float  # pixels


def ellipse_perimeter(a: float, b: float) -> float:
    """Exact arc length 4a*E(m) with m = 1 - (b/a)^2, a >= b."""
    a, b = max(a, b), min(a, b)
    return 4.0 * a * float(ellipe(1.0 - (b / a) ** 2))


def ellipse_mask(
    a: float, b: float, theta: float, size: int = CROP, center: tuple[float, float] | None = None
) -> Image:
    """Binary raster of a rotated ellipse with semi-axes a, b.

    Placed at ``center`` (row, col), or the image midpoint when omitted.
    """
    cy, cx = ((size - 1) / 2.0, (size - 1) / 2.0) if center is None else center
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = xx - cx
    y = yy - cy
    u = np.cos(theta) * x + np.sin(theta) * y
    w = -np.sin(theta) * x + np.cos(theta) * y
    return Image(((u / a) ** 2 + (w / b) ** 2 <= 1.0).astype(np.float64))


def disk_image(radius: float, size: int = CROP) -> Image:
    return ellipse_mask(radius, radius, 0.0, size)


_MARGIN = 4.0


def generate_ellipses(
    seed: int,
    count: int,
    constraint: ConstantArea | ConstantPerimeter,
    rho_range: tuple[float, float] = (1.0, 3.0),
) -> list[ShapeSample]:
    """Random-orientation ellipses holding area or perimeter exactly fixed.

    Aspect ratios rho = a/b are drawn uniformly from rho_range; under a
    fixed area the semi-axes follow in closed form, under a fixed perimeter
    the unit-shape arc length is rescaled exactly.  Centers are uniform
    over the placements that keep a 4 px margin, so a classifier cannot
    lean on a fixed position; draws whose long axis cannot fit anywhere
    are rejected and redrawn.
    """
    limit = (CROP - 1) / 2.0 - _MARGIN
    if isinstance(constraint, ConstantArea):
        if constraint.value <= 0 or np.sqrt(constraint.value / np.pi) > limit:
            raise ValueError(f"no ellipse of area {constraint.value} fits with margin")
    elif isinstance(constraint, ConstantPerimeter):
        if constraint.value <= 0 or constraint.value / (2 * np.pi) > limit:
            raise ValueError(f"no ellipse of perimeter {constraint.value} fits with margin")
    else:
        raise TypeError("constraint must be ConstantArea or ConstantPerimeter")

    samples = []
    for index in range(count):
        rng = sample_stream(seed, index)
        for _ in range(1000):
            rho = rng.uniform(*rho_range)
            theta = rng.uniform(0.0, np.pi)
            if isinstance(constraint, ConstantArea):
                a = float(np.sqrt(constraint.value * rho / np.pi))
                b = float(np.sqrt(constraint.value / (np.pi * rho)))
            else:
                a1, b1 = np.sqrt(rho), 1.0 / np.sqrt(rho)
                s = constraint.value / ellipse_perimeter(a1, b1)
                a, b = float(s * a1), float(s * b1)
            if a <= limit:
                break
        else:
            raise ValueError("could not draw a feasible ellipse; tighten rho_range")
        lo, hi = _MARGIN + a, CROP - 1 - _MARGIN - a
        img = ellipse_mask(a, b, theta, center=tuple(rng.uniform(lo, hi, size=2)))
        # labels are the analytic values, so the constrained quantity is
        # bit-for-bit constant across the batch; only the raster quantizes
        if isinstance(constraint, ConstantArea):
            area, perimeter = constraint.value, ellipse_perimeter(a, b)
        else:
            area, perimeter = float(np.pi * a * b), constraint.value
        samples.append(ShapeSample(img, area, perimeter))
    return samples


# --- IDX formats ------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def load_idx(path):
    """Parse an IDX raster or label file.

    Returns a list of [0, 1]-scaled 28x28-style Images for the raster
    magic, or an integer label array for the label magic.
    """
    raw = open(path, "rb").read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated magic at offset 0 (got {len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_IMAGES:
        if len(raw) < 16:
            raise IdxFormatError(f"{path}: truncated header at offset 4")
        count, rows, cols = struct.unpack(">III", raw[4:16])
        need = 16 + count * rows * cols
        if len(raw) < need:
            raise IdxFormatError(
                f"{path}: truncated pixel data at offset {len(raw)} (need {need} bytes)"
            )
        data = np.frombuffer(raw[16:need], dtype=np.uint8).reshape(count, rows, cols)
        return [Image(img / 255.0) for img in data]
    if magic == IDX_LABELS:
        if len(raw) < 8:
            raise IdxFormatError(f"{path}: truncated header at offset 4")
        (count,) = struct.unpack(">I", raw[4:8])
        if len(raw) < 8 + count:
            raise IdxFormatError(
                f"{path}: truncated label data at offset {len(raw)} (need {8 + count} bytes)"
            )
        return np.frombuffer(raw[8 : 8 + count], dtype=np.uint8).astype(int)
    raise IdxFormatError(f"{path}: unknown magic 0x{magic:08x} at offset 0")


def save_idx(path, payload) -> None:
    """Write images (list of Images) or labels (int array) in IDX layout."""
    with open(path, "wb") as f:
        if isinstance(payload, np.ndarray) and payload.ndim == 1:
            f.write(struct.pack(">II", IDX_LABELS, payload.size))
            f.write(payload.astype(np.uint8).tobytes())
            return
        imgs = list(payload)
        h, w = imgs[0].data.shape
        f.write(struct.pack(">IIII", IDX_IMAGES, len(imgs), h, w))
        for img in imgs:
            f.write(np.clip(np.round(img.data * 255.0), 0, 255).astype(np.uint8).tobytes())


# --- synthetic digits -------------------------------------------------------


def synthetic_digits(seed: int, count: int, size: int = 28) -> list[Image]:
    """Digit-like strokes for offline runs: random quadratic curves drawn
    with a soft round pen on a black canvas, normalized to peak 1."""
    images = []
    for index in range(count):
        rng = sample_stream(seed, index)
        canvas = np.zeros((size, size))
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        for _ in range(rng.integers(2, 5)):
            pts = rng.uniform(4.0, size - 4.0, size=(3, 2))
            t = np.linspace(0.0, 1.0, 60)[:, None]
            curve = ((1 - t) ** 2) * pts[0] + 2 * t * (1 - t) * pts[1] + t**2 * pts[2]
            for cy, cx in curve:
                canvas += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.8**2))
        peak = canvas.max()
        if peak > 0:
            canvas /= peak
        images.append(Image(canvas))
    return images


# --- grad^2 target synthesis ------------------------------------------------

TARGET_DERIVATIVE_SIGMA = 1.0


def make_grad_samples(images: list[Image], seed: int) -> list[GradSample]:
    """Scale each image by u ~ U(0.5, 2.0) and attach its squared gradient
    magnitude, estimated with unit-scale Gaussian derivative kernels."""
    kx = gaussian_derivative_kernel(TARGET_DERIVATIVE_SIGMA, "x")
    ky = gaussian_derivative_kernel(TARGET_DERIVATIVE_SIGMA, "y")
    samples = []
    for index, img in enumerate(images):
        rng = sample_stream(seed, index, "scale")
        u = float(rng.uniform(0.5, 2.0))
        scaled = u * img.data
        batch = scaled[None]
        dx = conv_same(batch, kx.taps, BoundaryMode.REFLECT)[0]
        dy = conv_same(batch, ky.taps, BoundaryMode.REFLECT)[0]
        samples.append(GradSample(Image(scaled), Image(dx**2 + dy**2), u))
    return samples


# --- dataset directories ----------------------------------------------------

MANIFEST_COLUMNS = ["file", "area", "perimeter", "class", "scale", "noise_sigma"]


def _fmt(x) -> str:
    return "" if x is None else repr(float(x)) if isinstance(x, float) else str(x)


def save_dataset(dirpath, samples, params: dict, splits: dict[str, tuple[int, int]]) -> None:
    """Write LONR rasters plus a manifest.csv.

    The manifest carries generation parameters and split row-ranges as
    leading comment lines; rows appear in sample order, which is what the
    split ranges index.  Output is byte-stable for fixed inputs.
    """
    from pathlib import Path

    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        name = f"sample_{i:05d}.lonr"
        if isinstance(s, GradSample):
            write_lonr(s.input, d / name)
            write_lonr(s.target, d / f"sample_{i:05d}_target.lonr")
            rows.append([name, "", "", "", _fmt(s.scale_factor), ""])
        else:
            write_lonr(s.image, d / name)
            rows.append([
                name,
                _fmt(s.area),
                _fmt(s.perimeter),
                "" if s.class_label is None else str(s.class_label),
                "",
                _fmt(s.noise_sigma),
            ])
    with open(d / "manifest.csv", "w", newline="") as f:
        for key in sorted(params):
            f.write(f"# {key}={params[key]}\n")
        for name in sorted(splits):
            lo, hi = splits[name]
            f.write(f"# split.{name}={lo}:{hi}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)


def load_dataset(dirpath):
    """Read a dataset directory back: (samples, params, splits)."""
    from pathlib import Path

    d = Path(dirpath)
    params: dict = {}
    splits: dict = {}
    body = []
    with open(d / "manifest.csv", newline="") as f:
        for line in f:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                key = key.strip()
                if key.startswith("split."):
                    lo, _, hi = val.partition(":")
                    splits[key.removeprefix("split.")] = (int(lo), int(hi))
                else:
                    params[key] = val
            else:
                body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    if header != MANIFEST_COLUMNS:
        raise ValueError(f"unexpected manifest columns {header}")
    samples = []
    for row in reader:
        name, area, perimeter, cls, scale, noise = row
        if scale:
            inp = read_lonr(d / name)
            target = read_lonr(d / (name.removesuffix(".lonr") + "_target.lonr"))
            samples.append(GradSample(inp, target, float(scale)))
        else:
            samples.append(
                ShapeSample(
                    read_lonr(d / name),
                    float(area),
                    float(perimeter),
                    int(cls) if cls else None,
                    float(noise) if noise else 0.0,
                )
            )
    return samples, params, splits
