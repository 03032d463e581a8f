"""Dense 2-D images, Gaussian kernel families, and convolution with explicit boundaries.

Everything in this module is 64-bit floating point so that downstream
finite-difference gradient checks have enough headroom.  All operations are
pure: inputs are never mutated and results are fresh arrays, so values can be
shared freely across threads.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum

import numpy as np

LONR_MAGIC = b"LONR"


class DimensionError(ValueError):
    """Shapes that cannot be combined (kernel larger than image, size mismatch)."""


class LonrFormatError(ValueError):
    """Malformed LONR raster file."""


class PgmFormatError(ValueError):
    """Malformed PGM file."""


class BoundaryMode(Enum):
    """How convolution reads pixels outside the image support.

    REFLECT mirrors with the edge pixel repeated (``abc -> cba|abc|cba``),
    which preserves constants and avoids artificial edges on shape images.
    """

    ZERO_PAD = "zero_pad"
    REFLECT = "reflect"


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel raster, row-major float64, shape (height, width)."""

    data: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.data, dtype=np.float64)
        if a.ndim != 2 or a.size == 0:
            raise DimensionError(
                f"image must be non-empty and 2-D, got shape {np.shape(self.data)}"
            )
        if not np.isfinite(a).all():
            raise ValueError("image values must be finite")
        object.__setattr__(self, "data", a)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "Image":
        return cls(np.zeros((height, width)))


@dataclass(frozen=True, eq=False)
class Kernel:
    """Square convolution kernel with an odd side; the origin is the centre tap.

    ``taps[radius + dy, radius + dx]`` is the kernel value at spatial offset
    ``(dx, dy)``, with x along columns and y along rows.
    """

    taps: np.ndarray

    def __post_init__(self):
        t = np.ascontiguousarray(self.taps, dtype=np.float64)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise DimensionError(f"kernel must be square, got shape {np.shape(self.taps)}")
        if t.shape[0] % 2 == 0:
            raise DimensionError("kernel side must be odd so the origin is the centre")
        if not np.isfinite(t).all():
            raise ValueError("kernel taps must be finite")
        object.__setattr__(self, "taps", t)

    @property
    def side(self) -> int:
        return self.taps.shape[0]

    @property
    def radius(self) -> int:
        return self.taps.shape[0] // 2


def identity_kernel(side: int = 1) -> Kernel:
    """Kernel that leaves any image unchanged under convolution."""
    taps = np.zeros((side, side))
    taps[side // 2, side // 2] = 1.0
    return Kernel(taps)


def _offset_grid(radius: int):
    c = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.meshgrid(c, c)  # xx varies along columns, yy along rows


def gaussian_kernel(sigma: float, radius: int | None = None) -> Kernel:
    """Sampled 2-D Gaussian, truncated at ``radius`` and renormalized to sum 1.

    The default radius is ceil(3*sigma).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    if radius < 1:
        radius = 1
    xx, yy = _offset_grid(radius)
    taps = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    taps /= taps.sum()
    return Kernel(taps)


def gaussian_taps_1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """One separable factor of gaussian_kernel(sigma): 1-D taps summing to 1.

    The outer product of this vector with itself reproduces the 2-D kernel, so
    two passes along rows and columns equal one 2-D smoothing pass at a
    fraction of the cost.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    if radius < 1:
        radius = 1
    c = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-(c**2) / (2.0 * sigma**2))
    taps /= taps.sum()
    return taps


def gaussian_derivative_kernel(sigma: float, axis: str, radius: int | None = None) -> Kernel:
    """First derivative of a 2-D Gaussian along ``axis`` ('x' is along columns).

    Taps are renormalized after truncation so the sum is exactly 0 and the
    first moment along the axis is exactly -1; convolving a unit ramp then
    yields slope 1 on interior pixels.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    if radius < 1:
        radius = 1
    xx, yy = _offset_grid(radius)
    along = xx if axis == "x" else yy
    taps = -along / sigma**2 * np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2))
    taps -= taps.mean()
    moment = float((along * taps).sum())  # ~ -1 before correction
    taps /= -moment
    return Kernel(taps)


def semigroup_scale(gamma: float, sigma: float) -> float:
    """Width of the single Gaussian equal to smoothing at gamma then sigma."""
    if gamma < 0 or sigma < 0:
        raise ValueError(f"scales must be non-negative, got {gamma}, {sigma}")
    return math.hypot(gamma, sigma)


# --- convolution engine -----------------------------------------------------
#
# conv_same / conv_same_grad_* operate on plain arrays whose last two axes are
# (rows, cols); leading axes are treated as a batch.  They are exact adjoints
# of each other, which the analytic layer gradients rely on.  Taps may be
# rectangular, e.g. (1, L) or (L, 1) for one pass of a separable kernel.


def _pad(x: np.ndarray, r: tuple[int, int], mode: BoundaryMode) -> np.ndarray:
    rh, rw = r
    width = [(0, 0)] * (x.ndim - 2) + [(rh, rh), (rw, rw)]
    if mode is BoundaryMode.ZERO_PAD:
        return np.pad(x, width)
    return np.pad(x, width, mode="symmetric")


def conv_same(x: np.ndarray, taps: np.ndarray, mode: BoundaryMode) -> np.ndarray:
    """'Same'-size true convolution (kernel flipped) of a batch of rasters."""
    sh, sw = taps.shape
    rh, rw = sh // 2, sw // 2
    h, w = x.shape[-2:]
    if sh > h or sw > w:
        raise DimensionError(f"kernel {taps.shape} exceeds image extent {(h, w)}")
    xp = _pad(x, (rh, rw), mode)
    out = np.zeros_like(x)
    fk = taps[::-1, ::-1]
    for u in range(sh):
        for v in range(sw):
            t = fk[u, v]
            if t != 0.0:
                out += t * xp[..., u : u + h, v : v + w]
    return out


def conv_same_grad_taps(x: np.ndarray, g: np.ndarray, mode: BoundaryMode, side: int) -> np.ndarray:
    """Gradient of ``sum(g * conv_same(x, k, mode))`` with respect to the taps."""
    r = side // 2
    h, w = x.shape[-2:]
    xp = _pad(x, (r, r), mode)
    dfk = np.empty((side, side))
    for u in range(side):
        for v in range(side):
            dfk[u, v] = np.vdot(xp[..., u : u + h, v : v + w], g)
    return dfk[::-1, ::-1]


def conv_same_grad_input(g: np.ndarray, taps: np.ndarray, mode: BoundaryMode) -> np.ndarray:
    """Gradient of ``sum(g * conv_same(x, k, mode))`` with respect to ``x``.

    The padding operator is linear, so this is the padded-scatter adjoint of
    conv_same; for REFLECT the mirrored margins fold back onto their source
    pixels.
    """
    sh, sw = taps.shape
    rh, rw = sh // 2, sw // 2
    h, w = g.shape[-2:]
    fk = taps[::-1, ::-1]
    dxp = np.zeros(g.shape[:-2] + (h + 2 * rh, w + 2 * rw))
    for u in range(sh):
        for v in range(sw):
            t = fk[u, v]
            if t != 0.0:
                dxp[..., u : u + h, v : v + w] += t * g
    if mode is BoundaryMode.ZERO_PAD or (rh == 0 and rw == 0):
        return np.ascontiguousarray(dxp[..., rh : rh + h, rw : rw + w])
    idx = np.pad(np.arange(h * w).reshape(h, w), ((rh, rh), (rw, rw)), mode="symmetric").ravel()
    flat = dxp.reshape(-1, (h + 2 * rh) * (w + 2 * rw))
    out = np.empty((flat.shape[0], h * w))
    for b in range(flat.shape[0]):
        out[b] = np.bincount(idx, weights=flat[b], minlength=h * w)
    return out.reshape(g.shape[:-2] + (h, w))


def convolve(img: Image, kernel: Kernel, mode: BoundaryMode) -> Image:
    """'Same'-size convolution of an image, linear in the image."""
    return Image(conv_same(img.data, kernel.taps, mode))


# --- file formats -----------------------------------------------------------


def write_lonr(img: Image, path) -> None:
    """Raw raster: 16-byte header (magic, width, height, reserved, LE) + LE float64 rows."""
    header = struct.pack("<4sIII", LONR_MAGIC, img.width, img.height, 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(img.data.astype("<f8").tobytes())


def read_lonr(path) -> Image:
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) < 16:
            raise LonrFormatError(f"{path}: truncated header ({len(header)} bytes)")
        magic, width, height, _ = struct.unpack("<4sIII", header)
        if magic != LONR_MAGIC:
            raise LonrFormatError(f"{path}: bad magic {magic!r}")
        payload = f.read()
    expected = 8 * width * height
    if len(payload) != expected:
        raise LonrFormatError(f"{path}: expected {expected} data bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f8").reshape(height, width)
    return Image(data.copy())


def write_pgm(img: Image, path, maxval: int = 255, lo: float | None = None, hi: float | None = None):
    """Binary (P5) PGM.  Values are mapped linearly from [lo, hi] to [0, maxval].

    lo/hi default to the image min/max; the pair actually used is returned so
    callers can record the scaling in a sidecar.
    """
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    a = img.data
    lo = float(a.min()) if lo is None else float(lo)
    hi = float(a.max()) if hi is None else float(hi)
    span = hi - lo if hi > lo else 1.0
    q = np.clip(np.rint((a - lo) / span * maxval), 0, maxval)
    dtype = ">u2" if maxval == 65535 else "u1"
    with open(path, "wb") as f:
        f.write(f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii"))
        f.write(q.astype(dtype).tobytes())
    return lo, hi


def _pgm_tokens(f):
    # PGM headers are whitespace-delimited tokens with '#' comments.
    while True:
        c = f.read(1)
        if not c:
            raise PgmFormatError("unexpected end of PGM header")
        if c.isspace():
            continue
        if c == b"#":
            while c not in (b"\n", b""):
                c = f.read(1)
            continue
        token = c
        while True:
            c = f.read(1)
            if not c or c.isspace():
                return token
            token += c


def read_pgm(path) -> Image:
    """Read a binary (P5) PGM; values are scaled by maxval into [0, 1]."""
    with open(path, "rb") as f:
        if f.read(2) != b"P5":
            raise PgmFormatError(f"{path}: not a P5 PGM")
        width = int(_pgm_tokens(f))
        height = int(_pgm_tokens(f))
        maxval = int(_pgm_tokens(f))
        if not 0 < maxval < 65536:
            raise PgmFormatError(f"{path}: bad maxval {maxval}")
        dtype = ">u2" if maxval > 255 else "u1"
        count = width * height
        payload = f.read(count * (2 if maxval > 255 else 1))
    data = np.frombuffer(payload, dtype=dtype)
    if data.size != count:
        raise PgmFormatError(f"{path}: expected {count} pixels, got {data.size}")
    return Image(data.reshape(height, width).astype(np.float64) / maxval)
