"""Losses, the Adam optimizer, the training loop, and the gradient checker.

Parameters travel between the layer and the optimizer as a flat vector with a
layout descriptor, so the finite-difference checker and Adam see exactly the
same coordinates the analytic backward pass produces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .layers import (
    SIGMA_ACTIVATIONS,
    ConvLayerBase,
    DenseHead,
    backward_batch,
    forward_batch,
)


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; carries the last good parameters."""

    def __init__(self, message, last_good=None, metrics=None):
        super().__init__(message)
        self.last_good = last_good
        self.metrics = metrics or []


class LossKind(Enum):
    PIXEL_MSE = "pixel_mse"
    SCALAR_MSE = "scalar_mse"
    CROSS_ENTROPY = "cross_entropy"


def loss_and_grad(kind: LossKind, prediction: np.ndarray, target: np.ndarray):
    """Loss value and its gradient with respect to the prediction."""
    prediction = np.asarray(prediction, dtype=np.float64)
    if kind in (LossKind.PIXEL_MSE, LossKind.SCALAR_MSE):
        target = np.asarray(target, dtype=np.float64)
        if prediction.shape != target.shape:
            raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
        diff = prediction - target
        value = float(np.mean(diff**2))
        return value, 2.0 * diff / diff.size
    if kind is LossKind.CROSS_ENTROPY:
        labels = np.asarray(target)
        if prediction.ndim != 2:
            raise ValueError("cross-entropy expects (B, O) logits")
        bsz, n_out = prediction.shape
        if labels.shape != (bsz,) or labels.min() < 0 or labels.max() >= n_out:
            raise ValueError(f"labels must be class indices below {n_out}")
        shifted = prediction - prediction.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1))
        value = float(np.mean(logsumexp - shifted[np.arange(bsz), labels]))
        grad = np.exp(shifted)
        grad /= grad.sum(axis=1, keepdims=True)
        grad[np.arange(bsz), labels] -= 1.0
        return value, grad / bsz
    raise ValueError(f"unknown loss {kind}")


# --- flat parameter views ---------------------------------------------------


@dataclass(frozen=True)
class FieldSlice:
    name: str
    shape: tuple
    start: int
    stop: int


def _param_arrays(layer: ConvLayerBase):
    fields = [("kernels", layer.kernels), ("biases", layer.biases)]
    if layer.sigma_learnable and layer.activation in SIGMA_ACTIVATIONS:
        fields.append(("log_sigmas", layer.log_sigmas))
    head = layer.head
    if isinstance(head, DenseHead):
        fields += [("head_weights", head.weights), ("head_bias", head.bias)]
    else:
        fields += [("head_weights", head.weights), ("head_bias", np.array([head.bias]))]
    return fields


def flatten_params(layer: ConvLayerBase):
    """Flat float64 copy of all learnable parameters plus its layout."""
    layout, chunks, pos = [], [], 0
    for name, arr in _param_arrays(layer):
        a = np.asarray(arr, dtype=np.float64).ravel()
        layout.append(FieldSlice(name, np.shape(arr), pos, pos + a.size))
        chunks.append(a)
        pos += a.size
    return np.concatenate(chunks), layout


def write_back(layer: ConvLayerBase, vec: np.ndarray, layout) -> None:
    """Copy a flat vector into the layer's parameter arrays (in place)."""
    for fs in layout:
        chunk = vec[fs.start : fs.stop].reshape(fs.shape)
        if fs.name == "head_bias" and not isinstance(layer.head, DenseHead):
            layer.head.bias = float(chunk[0])
        elif fs.name in ("head_weights", "head_bias"):
            getattr(layer.head, fs.name.removeprefix("head_"))[...] = chunk
        else:
            getattr(layer, fs.name)[...] = chunk


def flatten_grads(grads, layout) -> np.ndarray:
    out = np.empty(layout[-1].stop)
    for fs in layout:
        out[fs.start : fs.stop] = np.asarray(getattr(grads, fs.name)).ravel()
    return out


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def ensure(self, size: int):
        if self.m is None:
            self.m = np.zeros(size)
            self.v = np.zeros(size)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameter vector."""
    if params.shape != grads.shape:
        raise ValueError(f"length mismatch: {params.shape} vs {grads.shape}")
    if not np.isfinite(grads).all():
        raise TrainingDiverged("non-finite gradient in Adam step")
    state.ensure(params.size)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# --- training loop ----------------------------------------------------------


@dataclass
class Batch:
    """One dataset split as dense arrays.

    inputs  : (B, H, W)
    targets : (B, H, W) for pixel regression, (B, O) for scalar regression,
              (B,) int class labels for classification
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def evaluate(layer: ConvLayerBase, data: Batch, loss_kind: LossKind, batch_size: int = 256):
    """Mean loss (and accuracy for classification) over a split.

    Accumulation order is fixed by the chunking, so repeated calls are
    bit-identical; the training loop logs its per-epoch metrics through this
    same path.
    """
    total, correct, seen = 0.0, 0, 0
    for start in range(0, len(data), batch_size):
        xb = data.inputs[start : start + batch_size]
        tb = data.targets[start : start + batch_size]
        out, _ = forward_batch(layer, xb)
        value, _ = loss_and_grad(loss_kind, out, tb)
        total += value * xb.shape[0]
        seen += xb.shape[0]
        if loss_kind is LossKind.CROSS_ENTROPY:
            correct += int((out.argmax(axis=1) == tb).sum())
    loss = float(total / seen)
    accuracy = correct / seen if loss_kind is LossKind.CROSS_ENTROPY else None
    return loss, accuracy


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float | None


def train_model(
    layer: ConvLayerBase,
    train_data: Batch,
    *,
    loss_kind: LossKind,
    epochs: int,
    batch_size: int,
    lr: float,
    shuffle_rng: np.random.Generator,
    val_data: Batch | None = None,
    eval_batch: int = 256,
    log_every: int = 1,
):
    """Optimize the layer in place; returns per-epoch metrics rows.

    The shuffle order comes from its own RNG stream so that changing the
    epoch count never perturbs initialization elsewhere.  Logged rows are
    post-epoch full-split evaluations, so re-evaluating a split after
    training reproduces the logged value exactly; log_every thins them to
    every k-th epoch (the final epoch is always logged, and the optimizer
    trajectory is unaffected).  Batches larger than the dataset fall back
    to full-batch steps.  On divergence the last finite parameters are
    attached to the raised TrainingDiverged.
    """
    if log_every < 1:
        raise ValueError("log_every must be at least 1")
    params, layout = flatten_params(layer)
    state = AdamState(lr=lr)
    n = len(train_data)
    bsz = min(batch_size, n)
    metrics: list[MetricsRow] = []

    def log_epoch(epoch):
        loss, acc = evaluate(layer, train_data, loss_kind, eval_batch)
        metrics.append(MetricsRow(epoch, "train", loss, acc))
        if val_data is not None and len(val_data):
            vloss, vacc = evaluate(layer, val_data, loss_kind, eval_batch)
            metrics.append(MetricsRow(epoch, "val", vloss, vacc))
        return loss

    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        last_good = params.copy()
        try:
            for start in range(0, n, bsz):
                sel = order[start : start + bsz]
                out, tape = forward_batch(layer, train_data.inputs[sel])
                value, g = loss_and_grad(loss_kind, out, train_data.targets[sel])
                if not np.isfinite(value):
                    raise TrainingDiverged(f"loss became non-finite at epoch {epoch}")
                grads, _ = backward_batch(layer, tape, g)
                params = adam_step(state, params, flatten_grads(grads, layout))
                write_back(layer, params, layout)
        except TrainingDiverged as exc:
            write_back(layer, last_good, layout)
            raise TrainingDiverged(str(exc), last_good=last_good, metrics=metrics) from None
        if epoch % log_every == 0 or epoch == epochs:
            log_epoch(epoch)
    if epochs == 0:
        log_epoch(0)
    return metrics


# --- finite-difference checker ----------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict  # field name -> worst relative error
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def worst(self) -> float:
        return max(self.max_rel_error.values())


def _rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def gradcheck(
    layer: ConvLayerBase,
    inputs: np.ndarray,
    targets: np.ndarray,
    loss_kind: LossKind,
    *,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    corrupt_analytic: float = 0.0,
) -> GradCheckReport:
    """Central finite differences against the analytic backward pass.

    Checks every learnable parameter and every input pixel on a small
    instance and reports the worst relative error per field group.  Never
    raises on a failing comparison; read ``report.passed``.

    corrupt_analytic is the checker's own negative control: a nonzero
    value is added to every analytic gradient before comparison, and a
    healthy checker must then report every field group as failing.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    if inputs.ndim != 3:
        raise ValueError("gradcheck expects a (B, H, W) input batch")

    params, layout = flatten_params(layer)

    def loss_at(vec, x):
        write_back(layer, vec, layout)
        out, _ = forward_batch(layer, x)
        value, _ = loss_and_grad(loss_kind, out, targets)
        return value

    out, tape = forward_batch(layer, inputs)
    _, g = loss_and_grad(loss_kind, out, targets)
    grads, grad_x = backward_batch(layer, tape, g, need_input_grad=True)
    flat_analytic = flatten_grads(grads, layout)
    if corrupt_analytic:
        flat_analytic = flat_analytic + corrupt_analytic
        grad_x = grad_x + corrupt_analytic

    worst = {fs.name: 0.0 for fs in layout}
    for fs in layout:
        for k in range(fs.start, fs.stop):
            probe = params.copy()
            probe[k] = params[k] + step
            up = loss_at(probe, inputs)
            probe[k] = params[k] - step
            down = loss_at(probe, inputs)
            numeric = (up - down) / (2.0 * step)
            worst[fs.name] = max(worst[fs.name], _rel_err(numeric, flat_analytic[k]))
    write_back(layer, params, layout)

    worst["input"] = 0.0
    flat_x = inputs.reshape(-1)
    for k in range(flat_x.size):
        orig = flat_x[k]
        flat_x[k] = orig + step
        up = loss_at(params, inputs)
        flat_x[k] = orig - step
        down = loss_at(params, inputs)
        flat_x[k] = orig
        numeric = (up - down) / (2.0 * step)
        worst["input"] = max(worst["input"], _rel_err(numeric, grad_x.reshape(-1)[k]))

    return GradCheckReport(max_rel_error=worst, tolerance=tolerance)
