"""Local histograms, closed-form estimators, and saliency maps.

The histogram stack realizes h(x, b) = (W * f(b - I*K))(x) for a grid of
bias values; expectations against it implement the law-of-the-unconscious-
statistician shortcut, which the gradient-magnitude, circumference, and
area estimators specialize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.special import erf

from .image import (
    BoundaryMode,
    Image,
    Kernel,
    conv_same,
    gaussian_derivative_kernel,
    gaussian_kernel,
    semigroup_scale,
)
from .layers import DenseHead, backward_batch, forward_batch
from .train import LossKind, loss_and_grad

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class HistogramProbe:
    """One pixel's local histogram: bell responses over the bias grid."""

    position: tuple[int, int]
    bias_grid: np.ndarray
    values: np.ndarray
    spatial_scale: float
    tonal_scale: float


def local_histogram(
    img: Image,
    kernel: Kernel,
    spatial_scale: float,
    bias_grid: np.ndarray,
    tonal_scale: float,
    boundary: BoundaryMode = BoundaryMode.REFLECT,
) -> np.ndarray:
    """(N, H, W) stack of smoothed bell responses, one slab per bias.

    spatial_scale is the width of the Gaussian aggregation window W
    (0 keeps the raw pointwise responses); tonal_scale is the bell width.
    """
    bias_grid = np.asarray(bias_grid, dtype=np.float64)
    if bias_grid.ndim != 1 or bias_grid.size == 0:
        raise ValueError("bias grid must be a non-empty vector")
    if tonal_scale <= 0:
        raise ValueError("tonal scale must be positive")
    conv = conv_same(img.data[None], kernel.taps, boundary)
    bells = np.exp(-((bias_grid[:, None, None] - conv[0]) ** 2) / (2.0 * tonal_scale**2))
    if spatial_scale > 0:
        w = gaussian_kernel(spatial_scale)
        bells = conv_same(bells, w.taps, boundary)
    return bells


def probe_at(
    stack: np.ndarray, position: tuple[int, int], bias_grid, spatial_scale, tonal_scale
) -> HistogramProbe:
    y, x = position
    return HistogramProbe(
        position=(y, x),
        bias_grid=np.asarray(bias_grid, dtype=np.float64),
        values=stack[:, y, x].copy(),
        spatial_scale=spatial_scale,
        tonal_scale=tonal_scale,
    )


def lus_expectation(stack: np.ndarray, xi_values: np.ndarray, normalize: bool = True) -> Image:
    """Per-pixel expectation of xi under the histogram stack.

    xi_values holds xi evaluated on the stack's bias grid.  With
    normalize=True each pixel's column is scaled to unit mass first, which
    is what treating the histogram as a probability mass function means.
    """
    xi_values = np.asarray(xi_values, dtype=np.float64)
    if xi_values.shape != (stack.shape[0],):
        raise ValueError(
            f"xi sampled on {xi_values.shape}, but the stack has {stack.shape[0]} bins"
        )
    weighted = np.einsum("i,ihw->hw", xi_values, stack)
    if normalize:
        mass = stack.sum(axis=0)
        weighted = weighted / np.maximum(mass, 1e-300)
    return Image(weighted)


# --- gradient magnitude squared ---------------------------------------------


@dataclass(frozen=True)
class Grad2Result:
    image: Image
    grid_too_narrow: bool
    bias_grid: np.ndarray


GRID_EXTENSION = 1.3
TONAL_FRACTION = 0.75


def grad2_estimator(
    img: Image,
    derivative_scale: float,
    window_scale: float,
    bias_grid: np.ndarray | None = None,
    n_bins: int = 8,
    boundary: BoundaryMode = BoundaryMode.REFLECT,
) -> Grad2Result:
    """Per-axis histogram second moments of derivative responses, summed.

    The default grid spans the symmetric response range of both derivative
    images, extended 30% past the extremes so the strongest responses are
    never half-covered.  The tonal width is 0.75 of the grid spacing, and
    the known smear it adds to a second moment (one tonal variance per
    axis) is subtracted; the result is clamped at zero.  Grids that leave
    1% or more of the response mass outside their coverage are flagged.
    """
    responses = []
    for axis in ("x", "y"):
        k = gaussian_derivative_kernel(derivative_scale, axis)
        responses.append(conv_same(img.data[None], k.taps, boundary)[0])
    if bias_grid is None:
        reach = max(float(np.abs(r).max()) for r in responses)
        reach = max(reach, 1e-6) * GRID_EXTENSION
        bias_grid = np.linspace(-reach, reach, n_bins)
    bias_grid = np.asarray(bias_grid, dtype=np.float64)
    spacing = float(bias_grid[1] - bias_grid[0]) if bias_grid.size > 1 else 1.0
    tonal = TONAL_FRACTION * spacing

    lo, hi = bias_grid[0] - spacing / 2.0, bias_grid[-1] + spacing / 2.0
    outside = sum(int(((r < lo) | (r > hi)).sum()) for r in responses)
    total_px = 2 * img.data.size

    acc = np.zeros_like(img.data)
    for r in responses:
        bells = np.exp(-((bias_grid[:, None, None] - r) ** 2) / (2.0 * tonal**2))
        if window_scale > 0:
            w = gaussian_kernel(window_scale)
            bells = conv_same(bells, w.taps, boundary)
        mass = bells.sum(axis=0)
        second = np.einsum("i,ihw->hw", bias_grid**2, bells)
        acc += second / np.maximum(mass, 1e-300)
    acc = np.maximum(acc - 2.0 * tonal**2, 0.0)
    return Grad2Result(Image(acc), outside >= 0.01 * total_px, bias_grid)


def grad2_direct(
    img: Image, scale: float, boundary: BoundaryMode = BoundaryMode.REFLECT
) -> Image:
    """Plain squared gradient magnitude at one derivative scale."""
    kx = gaussian_derivative_kernel(scale, "x")
    ky = gaussian_derivative_kernel(scale, "y")
    dx = conv_same(img.data[None], kx.taps, boundary)[0]
    dy = conv_same(img.data[None], ky.taps, boundary)[0]
    return Image(dx**2 + dy**2)


def grad2_reference(
    img: Image, derivative_scale: float, window_scale: float,
    boundary: BoundaryMode = BoundaryMode.REFLECT,
) -> Image:
    """The scale the estimator effectively measures at: derivatives taken
    at sqrt(window^2 + derivative^2), squared and summed."""
    return grad2_direct(img, semigroup_scale(window_scale, derivative_scale), boundary)


# --- region estimators ------------------------------------------------------


def _smoothed_response(img: Image, k_scale: float, boundary: BoundaryMode) -> np.ndarray:
    return conv_same(img.data[None], gaussian_kernel(k_scale).taps, boundary)[0]


def circumference_raw(
    img: Image, k_scale: float, sigma: float, boundary: BoundaryMode = BoundaryMode.REFLECT
) -> float:
    """Sum of bell responses centered on the half-level set.

    The smoothed indicator crosses 0.5 along the region boundary, so the
    bell picks out a band whose summed response grows with contour length.
    """
    resp = _smoothed_response(img, k_scale, boundary)
    return float(np.exp(-((0.5 - resp) ** 2) / (2.0 * sigma**2)).sum())


def area_raw(
    img: Image, k_scale: float, sigma: float, boundary: BoundaryMode = BoundaryMode.REFLECT
) -> float:
    """Sum of the normalized integrated bell of the shifted response.

    Interior pixels saturate to 1, background to 0; the normalization keeps
    the blank-image and full-image limits at 0 and the pixel count.
    """
    resp = _smoothed_response(img, k_scale, boundary)
    z = (resp - 0.5) / sigma
    return float((0.5 * (1.0 + erf(z / SQRT2))).sum())


CALIBRATION_RADII = (18.0, 28.0, 38.0)


def calibrate_on_disks(kind: str, k_scale: float, sigma: float,
                       radii=CALIBRATION_RADII) -> float:
    """Multiplicative constant mapping raw sums to analytic disk truth."""
    from .datasets import disk_image

    ratios = []
    for r in radii:
        img = disk_image(float(r))
        if kind == "circumference":
            ratios.append(2.0 * math.pi * r / circumference_raw(img, k_scale, sigma))
        elif kind == "area":
            ratios.append(math.pi * r**2 / area_raw(img, k_scale, sigma))
        else:
            raise ValueError(f"unknown estimator kind {kind!r}")
    return float(np.mean(ratios))


def circumference_estimator(img: Image, k_scale: float, sigma: float,
                            calibration: float | None = None) -> float:
    if calibration is None:
        calibration = calibrate_on_disks("circumference", k_scale, sigma)
    return calibration * circumference_raw(img, k_scale, sigma)


def area_estimator(img: Image, k_scale: float, sigma: float,
                   calibration: float | None = None) -> float:
    if calibration is None:
        calibration = calibrate_on_disks("area", k_scale, sigma)
    return calibration * area_raw(img, k_scale, sigma)


# --- saliency ---------------------------------------------------------------


@dataclass(frozen=True)
class SaliencyMap:
    image: Image
    sample_id: str = ""
    model_id: str = ""
    predicted: int | None = None
    true_label: int | None = None


def saliency(layer, img: Image, target, loss_kind: LossKind,
             sample_id: str = "", model_id: str = "") -> SaliencyMap:
    """Absolute input-gradient of the loss for one sample."""
    out, tape = forward_batch(layer, img.data[None])
    if loss_kind is LossKind.CROSS_ENTROPY:
        t = np.array([int(target)])
        predicted = int(np.argmax(out[0]))
        true_label = int(target)
    else:
        t = target.data[None] if isinstance(target, Image) else np.asarray(target)[None]
        predicted = None
        true_label = None
    _, g = loss_and_grad(loss_kind, out, t)
    _, grad_x = backward_batch(layer, tape, g, need_input_grad=True)
    return SaliencyMap(Image(np.abs(grad_x[0])), sample_id, model_id, predicted, true_label)


def boundary_mass_ratio(sal: SaliencyMap | Image, mask: Image, width: float = 2.0) -> float:
    """Fraction of saliency mass within ``width`` pixels of the mask contour."""
    data = sal.image.data if isinstance(sal, SaliencyMap) else sal.data
    fg = mask.data > 0.5
    if not fg.any() or fg.all():
        raise ValueError("mask must have both foreground and background")
    d_in = distance_transform_edt(fg)
    d_out = distance_transform_edt(~fg)
    band = np.where(fg, d_in, d_out) <= width
    total = float(data.sum())
    if total == 0.0:
        return 0.0
    return float(data[band].sum()) / total
