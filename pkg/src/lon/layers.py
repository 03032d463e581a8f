"""Single-layer locally orderless (LON) and convolutional (CNN) networks.

A layer convolves the input with M learnable kernels, evaluates N bias-shifted
activations per kernel (bell-shaped for LON, sigmoid-family or ReLU for the
CNN counterpart), optionally smooths each of the M*N channel maps with a fixed
kernel, and feeds the channels into a linear head.  Forward passes record a
tape of intermediates from which the analytic backward pass produces gradients
for every learnable parameter and for the input image.

Activation widths are stored as log(sigma) so positivity is structural.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import erf

from .image import (
    BoundaryMode,
    DimensionError,
    Image,
    conv_same,
    conv_same_grad_input,
    conv_same_grad_taps,
    gaussian_taps_1d,
)

LONC_MAGIC = b"LONC"
LONC_VERSION = 1

SQRT2 = np.sqrt(2.0)
SQRT2PI = np.sqrt(2.0 * np.pi)


class Activation(Enum):
    GAUSS_BELL = "gauss_bell"
    LOGISTIC_SIGMOID = "logistic_sigmoid"
    INTEGRATED_BELL = "integrated_bell"
    RELU = "relu"


#: activations whose shape depends on a width parameter
SIGMA_ACTIVATIONS = frozenset(
    {Activation.GAUSS_BELL, Activation.LOGISTIC_SIGMOID, Activation.INTEGRATED_BELL}
)


def activation_value(kind: Activation, v: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Evaluate the activation at pre-activation v with per-unit width sigma.

    GAUSS_BELL is the unnormalized Gaussian exp(-v^2 / (2 sigma^2)) with value
    1 at v = 0; INTEGRATED_BELL is its running integral
    sigma * sqrt(2 pi) * Phi(v / sigma).
    """
    if kind is Activation.GAUSS_BELL:
        # in-place chain; exp dominates the training profile
        t = np.asarray(v * v, dtype=np.float64)
        if t.ndim == 0:
            return np.exp(-t / (2.0 * sigma**2))
        np.divide(t, -2.0 * sigma**2, out=t)
        return np.exp(t, out=t)
    if kind is Activation.LOGISTIC_SIGMOID:
        # equivalent to expit(v / sigma), written to avoid overflow warnings
        z = np.asarray(v / sigma, dtype=np.float64)
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind is Activation.INTEGRATED_BELL:
        z = v / sigma
        return sigma * SQRT2PI * 0.5 * (1.0 + erf(z / SQRT2))
    if kind is Activation.RELU:
        return np.maximum(v, 0.0)
    raise ValueError(f"unknown activation {kind}")


def activation_grad_v(kind: Activation, v, sigma, value) -> np.ndarray:
    """d activation / d v, reusing the forward value where it helps."""
    if kind is Activation.GAUSS_BELL:
        t = np.asarray(np.divide(v, sigma**2), dtype=np.float64)
        if t.ndim == 0:
            return -t * value
        np.negative(t, out=t)
        return np.multiply(t, value, out=t)
    if kind is Activation.LOGISTIC_SIGMOID:
        return value * (1.0 - value) / sigma
    if kind is Activation.INTEGRATED_BELL:
        # fundamental theorem of calculus: g' = f, the Gauss bell itself
        return activation_value(Activation.GAUSS_BELL, v, sigma)
    if kind is Activation.RELU:
        # subgradient at 0 defined as 0
        return (v > 0).astype(np.float64)
    raise ValueError(f"unknown activation {kind}")


def activation_grad_logsigma(kind: Activation, v, sigma, value) -> np.ndarray:
    """d activation / d log(sigma)."""
    if kind is Activation.GAUSS_BELL:
        t = np.asarray(np.multiply(value, v * v), dtype=np.float64)
        if t.ndim == 0:
            return t / sigma**2
        return np.divide(t, sigma**2, out=t)
    if kind is Activation.LOGISTIC_SIGMOID:
        return -value * (1.0 - value) * v / sigma
    if kind is Activation.INTEGRATED_BELL:
        bell = activation_value(Activation.GAUSS_BELL, v, sigma)
        return value - v * bell
    if kind is Activation.RELU:
        return np.zeros_like(v)
    raise ValueError(f"unknown activation {kind}")


# --- heads ------------------------------------------------------------------


@dataclass(eq=False)
class DenseHead:
    """Per-pixel linear read-out: weights (O, C, H, W) and bias (O,)."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass(eq=False)
class OneByOneHead:
    """1x1 convolution across channels: weights (C,) plus a single bias.

    Produces a per-pixel scalar field; with ``pooling='mean'`` the field is
    averaged into a single output.
    """

    weights: np.ndarray
    bias: float
    pooling: str = "none"  # none | mean


Head = DenseHead | OneByOneHead


@dataclass(eq=False)
class ConvLayerBase:
    """Shared parameter record for both network kinds.

    kernels    : (M, s, s) learnable convolution kernels
    biases     : (N, M) learnable bias grid, one row per activation unit
    log_sigmas : (N, M) learnable log-widths (ignored by ReLU)
    """

    kernels: np.ndarray
    biases: np.ndarray
    log_sigmas: np.ndarray
    head: Head
    activation: Activation
    boundary: BoundaryMode = BoundaryMode.REFLECT
    smoother_sigma: float = 0.0  # width of the fixed post-activation smoother, 0 = delta
    sigma_learnable: bool = True
    _smoother: np.ndarray | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        self.log_sigmas = np.asarray(self.log_sigmas, dtype=np.float64)
        if self.kernels.ndim != 3 or self.kernels.shape[1] != self.kernels.shape[2]:
            raise DimensionError(f"kernels must be (M, s, s), got {self.kernels.shape}")
        if self.biases.ndim != 2 or self.biases.shape[1] != self.kernels.shape[0]:
            raise DimensionError(f"biases must be (N, M), got {self.biases.shape}")
        if self.log_sigmas.shape != self.biases.shape:
            raise DimensionError("log_sigmas must match the bias grid shape")
        if self.smoother_sigma > 0:
            # kept as the 1-D factor; both passes of the separable smoothing
            # reuse it, and outer(t, t) is the full 2-D window
            self._smoother = gaussian_taps_1d(self.smoother_sigma)

    @property
    def n_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def n_bins(self) -> int:
        return self.biases.shape[0]

    @property
    def kernel_side(self) -> int:
        return self.kernels.shape[1]

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.log_sigmas)


class LonLayer(ConvLayerBase):
    """Locally orderless layer: a regular grid of Gauss-bell bias responses."""

    def __post_init__(self):
        if self.activation is not Activation.GAUSS_BELL:
            raise ValueError("LonLayer uses the Gauss bell activation")
        super().__post_init__()


class CnnLayer(ConvLayerBase):
    """Convolutional counterpart: sigmoid-family or ReLU activation."""

    def __post_init__(self):
        if self.activation is Activation.GAUSS_BELL:
            raise ValueError("CnnLayer takes a sigmoid-family or ReLU activation")
        super().__post_init__()


@dataclass(eq=False)
class ForwardTape:
    """Cached intermediates for the backward pass.

    Replaying the forward pass from ``x`` reproduces every cached array
    bit-for-bit.  Pre-activations are kept alongside the activations: the
    backward pass needs both, and the subtraction is memory-bandwidth the
    training loop would otherwise pay once more per batch.
    """

    x: np.ndarray         # (B, H, W) input batch
    conv: np.ndarray      # (B, M, H, W) kernel responses
    v: np.ndarray         # (B, N, M, H, W) pre-activations b - conv
    act: np.ndarray       # (B, N, M, H, W) activation outputs
    channels: np.ndarray  # act after smoothing (same object when smoother is delta)
    output: np.ndarray


@dataclass(eq=False)
class LayerGrads:
    """Gradients in one-to-one correspondence with the learnable fields."""

    kernels: np.ndarray
    biases: np.ndarray
    log_sigmas: np.ndarray
    head_weights: np.ndarray
    head_bias: np.ndarray  # scalar array for OneByOne heads


# --- initialization ---------------------------------------------------------


def init_layer(
    kind: str,
    *,
    n_kernels: int,
    n_bins: int,
    kernel_side: int,
    activation: Activation,
    head_kind: str,
    out_dim: int,
    image_shape: tuple[int, int] | None,
    init_batch: np.ndarray,
    rng: np.random.Generator,
    sigma_learnable: bool = True,
    boundary: BoundaryMode = BoundaryMode.REFLECT,
    smoother_sigma: float = 0.0,
    pooling: str = "none",
) -> ConvLayerBase:
    """Build a layer with seeded kernel init and a data-driven bias grid.

    Kernels are uniform in [-1/|K|, 1/|K|].  The bias grid per kernel
    divides the empirical response range of the init batch into N equal
    cells and places one bias at each cell center (the histogram reading
    of a regular grid, and the only one defined down to N = 1); widths
    start at half the cell so adjacent bells overlap at half height.
    """
    m, n, s = n_kernels, n_bins, kernel_side
    kernels = rng.uniform(-1.0 / s**2, 1.0 / s**2, size=(m, s, s))

    biases = np.empty((n, m))
    sigmas = np.empty((n, m))
    for j in range(m):
        resp = conv_same(init_batch, kernels[j], boundary)
        lo, hi = float(resp.min()), float(resp.max())
        span = max(hi - lo, 1e-3)
        step = span / n
        biases[:, j] = lo + step * (np.arange(n) + 0.5)
        sigmas[:, j] = step / 2.0

    channels = m * n
    if head_kind == "dense":
        if image_shape is None:
            raise ValueError("dense heads are size-bound and need image_shape")
        h, w = image_shape
        fan_in = channels * h * w
        head = DenseHead(
            weights=rng.uniform(-1.0, 1.0, size=(out_dim, channels, h, w)) / np.sqrt(fan_in),
            bias=np.zeros(out_dim),
        )
    elif head_kind == "one_by_one":
        head = OneByOneHead(
            weights=rng.uniform(-1.0 / channels, 1.0 / channels, size=channels),
            bias=0.0,
            pooling=pooling,
        )
    else:
        raise ValueError(f"unknown head kind {head_kind!r}")

    cls = LonLayer if kind == "lon" else CnnLayer
    return cls(
        kernels=kernels,
        biases=biases,
        log_sigmas=np.log(sigmas),
        head=head,
        activation=activation,
        boundary=boundary,
        smoother_sigma=smoother_sigma,
        sigma_learnable=sigma_learnable,
    )


# --- forward / backward -----------------------------------------------------


def forward_batch(layer: ConvLayerBase, x: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Run the layer on a (B, H, W) batch.

    Returns the head output, (B, O) for dense heads or (B, H, W) for 1x1
    heads ((B,) when mean-pooled), together with the tape.
    """
    if x.ndim != 3:
        raise DimensionError(f"expected a (B, H, W) batch, got shape {x.shape}")
    bsz, h, w = x.shape
    m, n = layer.n_kernels, layer.n_bins

    conv = np.empty((bsz, m, h, w))
    for j in range(m):
        conv[:, j] = conv_same(x, layer.kernels[j], layer.boundary)

    v = layer.biases[None, :, :, None, None] - conv[:, None, :, :, :]
    sig = layer.sigmas[None, :, :, None, None]
    act = activation_value(layer.activation, v, sig)

    if layer._smoother is not None:
        t = layer._smoother
        channels = np.empty_like(act)
        for i in range(n):
            for j in range(m):
                rows = conv_same(act[:, i, j], t[None, :], layer.boundary)
                channels[:, i, j] = conv_same(rows, t[:, None], layer.boundary)
    else:
        channels = act

    head = layer.head
    if isinstance(head, DenseHead):
        if head.weights.shape[1:] != (n * m, h, w):
            raise DimensionError(
                f"dense head expects channel block {head.weights.shape[1:]}, "
                f"got {(n * m, h, w)}"
            )
        flat = channels.reshape(bsz, -1)
        out = flat @ head.weights.reshape(head.out_dim, -1).T + head.bias
    else:
        out = np.einsum("bchw,c->bhw", channels.reshape(bsz, n * m, h, w), head.weights)
        out += head.bias
        if head.pooling == "mean":
            out = out.mean(axis=(1, 2))

    return out, ForwardTape(x=x, conv=conv, v=v, act=act, channels=channels, output=out)


def backward_batch(
    layer: ConvLayerBase,
    tape: ForwardTape,
    upstream: np.ndarray,
    *,
    need_input_grad: bool = False,
) -> tuple[LayerGrads, np.ndarray | None]:
    """Analytic gradients of sum(upstream * output) for all parameters.

    ``upstream`` must match the forward output shape.  The input-image
    gradient is only assembled on request; training does not need it.
    """
    if upstream.shape != tape.output.shape:
        raise DimensionError(
            f"upstream shape {upstream.shape} does not match output {tape.output.shape}"
        )
    bsz, h, w = tape.x.shape
    m, n = layer.n_kernels, layer.n_bins
    head = layer.head

    if isinstance(head, DenseHead):
        flat_ch = tape.channels.reshape(bsz, -1)
        d_head_w = (upstream.T @ flat_ch).reshape(head.weights.shape)
        d_head_b = upstream.sum(axis=0)
        g_ch = (upstream @ head.weights.reshape(head.out_dim, -1)).reshape(tape.channels.shape)
    else:
        g_pix = upstream
        if head.pooling == "mean":
            g_pix = np.broadcast_to(
                upstream[:, None, None] / (h * w), (bsz, h, w)
            )
        ch = tape.channels.reshape(bsz, n * m, h, w)
        d_head_w = np.einsum("bchw,bhw->c", ch, g_pix)
        d_head_b = np.asarray(g_pix.sum())
        g_ch = np.einsum("bhw,c->bchw", g_pix, head.weights).reshape(tape.channels.shape)

    if layer._smoother is not None:
        t = layer._smoother
        g_act = np.empty_like(g_ch)
        for i in range(n):
            for j in range(m):
                g_rows = conv_same_grad_input(g_ch[:, i, j], t[:, None], layer.boundary)
                g_act[:, i, j] = conv_same_grad_input(g_rows, t[None, :], layer.boundary)
    else:
        g_act = g_ch

    v = tape.v
    sig = layer.sigmas[None, :, :, None, None]
    g_v = activation_grad_v(layer.activation, v, sig, tape.act)
    g_v = np.multiply(g_v, g_act, out=g_v if g_v.shape == g_act.shape else None)

    d_biases = g_v.sum(axis=(0, 3, 4))
    if layer.sigma_learnable and layer.activation in SIGMA_ACTIVATIONS:
        if layer.activation in (Activation.GAUSS_BELL, Activation.LOGISTIC_SIGMOID):
            # for these shapes dact/dlogsigma = -v * dact/dv, so the
            # weighted sum contracts the already-scaled g_v against v
            d_log_sigmas = -np.einsum("bnmhw,bnmhw->nm", g_v, v)
        else:
            t = activation_grad_logsigma(layer.activation, v, sig, tape.act)
            d_log_sigmas = np.multiply(t, g_act, out=t if t.shape == g_act.shape else None).sum(
                axis=(0, 3, 4)
            )
    else:
        d_log_sigmas = np.zeros_like(layer.log_sigmas)

    g_conv = -g_v.sum(axis=1)  # (B, M, H, W); dv/dconv = -1
    d_kernels = np.empty_like(layer.kernels)
    for j in range(m):
        d_kernels[j] = conv_same_grad_taps(
            tape.x, g_conv[:, j], layer.boundary, layer.kernel_side
        )

    grad_x = None
    if need_input_grad:
        grad_x = np.zeros_like(tape.x)
        for j in range(m):
            grad_x += conv_same_grad_input(g_conv[:, j], layer.kernels[j], layer.boundary)

    return (
        LayerGrads(
            kernels=d_kernels,
            biases=d_biases,
            log_sigmas=d_log_sigmas,
            head_weights=d_head_w,
            head_bias=np.asarray(d_head_b, dtype=np.float64),
        ),
        grad_x,
    )


def _single(layer: ConvLayerBase, img: Image):
    out, tape = forward_batch(layer, img.data[None])
    if isinstance(layer.head, DenseHead):
        return out[0], tape
    if layer.head.pooling == "mean":
        return float(out[0]), tape
    return Image(out[0]), tape


def lon_forward(layer: LonLayer, img: Image):
    """Forward pass of a LON layer on one image: (output, tape)."""
    if not isinstance(layer, LonLayer):
        raise TypeError("lon_forward expects a LonLayer")
    return _single(layer, img)


def cnn_forward(layer: CnnLayer, img: Image):
    """Forward pass of a CNN layer on one image: (output, tape)."""
    if not isinstance(layer, CnnLayer):
        raise TypeError("cnn_forward expects a CnnLayer")
    return _single(layer, img)


def _single_backward(layer, tape, upstream):
    up = upstream.data if isinstance(upstream, Image) else np.asarray(upstream, dtype=np.float64)
    if up.shape == tape.output.shape[1:]:
        up = up[None]
    grads, gx = backward_batch(layer, tape, up, need_input_grad=True)
    return grads, Image(gx[0])


def lon_backward(layer: LonLayer, tape: ForwardTape, upstream):
    """Gradients for all parameters plus the input image, single-sample."""
    return _single_backward(layer, tape, upstream)


def cnn_backward(layer: CnnLayer, tape: ForwardTape, upstream):
    return _single_backward(layer, tape, upstream)


# --- LON / CNN emulation ----------------------------------------------------


def bin_spacing(layer: ConvLayerBase, j: int = 0, tol: float = 1e-9) -> float:
    """Spacing of a regular bias grid; raises if the grid is not regular."""
    b = layer.biases[:, j]
    if b.shape[0] < 2:
        raise ValueError("spacing needs at least two bins")
    steps = np.diff(b)
    if steps.min() <= 0 or (steps.max() - steps.min()) > tol * max(abs(steps).max(), 1.0):
        raise ValueError("bias grid is not a regular ascending grid")
    return float(steps.mean())


def emulate_cnn_from_lon(lon: LonLayer, img: Image, spacing: float | None = None) -> np.ndarray:
    """Cumulative-binned LON channels, scaled by the grid spacing.

    Returns a (N, M, H, W) stack; entry n approximates the integrated-bell
    CNN channel at bias b_n up to the Riemann-sum error of the grid.  With a
    single bin the spacing cannot be read off the grid and must be passed.
    """
    _, tape = forward_batch(lon, img.data[None])
    if spacing is None:
        spacing = bin_spacing(lon)
        for j in range(1, lon.n_kernels):
            bin_spacing(lon, j)
    return np.cumsum(tape.act[0], axis=0) * float(spacing)


# --- parameter counting -----------------------------------------------------


def count_params(layer: ConvLayerBase) -> dict:
    """Learnable-parameter counts.

    ``formula`` follows the convention used for parameter-count plots
    (kernel taps plus head only; bias grids and widths are not counted),
    ``actual`` counts every learnable scalar in the layer.
    """
    m, n, s = layer.n_kernels, layer.n_bins, layer.kernel_side
    kernel_taps = m * s * s
    head = layer.head
    if isinstance(head, DenseHead):
        formula = n * m * int(np.prod(head.weights.shape[2:])) + kernel_taps
        head_actual = head.weights.size + head.bias.size
    else:
        formula = n * m + 1 + kernel_taps
        head_actual = head.weights.size + 1
    actual = kernel_taps + layer.biases.size + head_actual
    if layer.sigma_learnable and layer.activation in SIGMA_ACTIVATIONS:
        actual += layer.log_sigmas.size
    return {"formula": formula, "actual": actual}


# --- checkpoint format ------------------------------------------------------

_ACT_TAGS = {a: i for i, a in enumerate(Activation)}
_HEAD_TAGS = {"dense": 0, "one_by_one": 1}
_POOL_TAGS = {"none": 0, "mean": 1}
_MODE_TAGS = {BoundaryMode.ZERO_PAD: 0, BoundaryMode.REFLECT: 1}


def save_checkpoint(layer: ConvLayerBase, path) -> None:
    """Versioned binary checkpoint.

    Layout: magic 'LONC', u32 version, u32 activation tag, u32 head tag,
    u32 pooling tag, u32 boundary tag, u32 sigma_learnable, u32 M, u32 N,
    u32 kernel side, u32 head rows, u32 head cols, u32 out dim,
    f64 smoother sigma (all little-endian), then kernels, biases, log-sigmas,
    head weights, head bias as little-endian float64 in that order.
    """
    head = layer.head
    if isinstance(head, DenseHead):
        head_tag, pool_tag = _HEAD_TAGS["dense"], 0
        hh, ww = head.weights.shape[2:]
        out_dim = head.out_dim
        head_arrays = [head.weights, head.bias]
    else:
        head_tag, pool_tag = _HEAD_TAGS["one_by_one"], _POOL_TAGS[head.pooling]
        hh = ww = 0
        out_dim = 1
        head_arrays = [head.weights, np.array([head.bias])]
    header = struct.pack(
        "<4sIIIIIIIIIIIId",
        LONC_MAGIC,
        LONC_VERSION,
        _ACT_TAGS[layer.activation],
        head_tag,
        pool_tag,
        _MODE_TAGS[layer.boundary],
        int(layer.sigma_learnable),
        layer.n_kernels,
        layer.n_bins,
        layer.kernel_side,
        hh,
        ww,
        out_dim,
        layer.smoother_sigma,
    )
    with open(path, "wb") as f:
        f.write(header)
        for a in [layer.kernels, layer.biases, layer.log_sigmas, *head_arrays]:
            f.write(np.asarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> ConvLayerBase:
    with open(path, "rb") as f:
        blob = f.read()
    fmt = "<4sIIIIIIIIIIIId"
    size = struct.calcsize(fmt)
    if len(blob) < size:
        raise ValueError(f"{path}: truncated checkpoint")
    (magic, version, act_tag, head_tag, pool_tag, mode_tag, sig_learn,
     m, n, s, hh, ww, out_dim, smoother_sigma) = struct.unpack(fmt, blob[:size])
    if magic != LONC_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != LONC_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    acts = list(Activation)
    activation = acts[act_tag]
    data = np.frombuffer(blob[size:], dtype="<f8")
    pos = 0

    def take(shape):
        nonlocal pos
        cnt = int(np.prod(shape))
        chunk = data[pos : pos + cnt]
        if chunk.size != cnt:
            raise ValueError(f"{path}: truncated parameter block")
        pos += cnt
        return chunk.reshape(shape).copy()

    kernels = take((m, s, s))
    biases = take((n, m))
    log_sigmas = take((n, m))
    if head_tag == _HEAD_TAGS["dense"]:
        head = DenseHead(weights=take((out_dim, n * m, hh, ww)), bias=take((out_dim,)))
    else:
        pooling = {v: k for k, v in _POOL_TAGS.items()}[pool_tag]
        head = OneByOneHead(weights=take((n * m,)), bias=float(take((1,))[0]), pooling=pooling)
    if pos != data.size:
        raise ValueError(f"{path}: {data.size - pos} unread parameter values")
    boundary = {v: k for k, v in _MODE_TAGS.items()}[mode_tag]
    cls = LonLayer if activation is Activation.GAUSS_BELL else CnnLayer
    return cls(
        kernels=kernels,
        biases=biases,
        log_sigmas=log_sigmas,
        head=head,
        activation=activation,
        boundary=boundary,
        smoother_sigma=smoother_sigma,
        sigma_learnable=bool(sig_learn),
    )
