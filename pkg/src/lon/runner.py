"""Experiment execution behind the command line.

Each function maps one subcommand onto the library: build a dataset
directory, sweep learning rates, evaluate a checkpoint, render saliency
maps, run the gradient-check suite, or probe a local histogram.  Every
CSV written here starts with a `# config=<hash>` comment so artifacts
stay traceable, and everything downstream of the config seed is
deterministic.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import boundary_mass_ratio, local_histogram, probe_at, saliency
from .config import CLASSIFICATION_TASKS, ConfigError, ExperimentConfig, config_hash
from .datasets import (
    ConstantArea,
    ConstantPerimeter,
    GradSample,
    add_noise,
    assign_classes,
    generate_blobs,
    generate_ellipses,
    load_dataset,
    make_grad_samples,
    named_stream,
    sample_stream,
    save_dataset,
    synthetic_digits,
)
from .image import Image, gaussian_kernel, identity_kernel, write_lonr, write_pgm
from .layers import (
    Activation,
    count_params,
    forward_batch,
    init_layer,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    Batch,
    LossKind,
    TrainingDiverged,
    evaluate,
    gradcheck,
    train_model,
)


class ArtifactError(Exception):
    """A file artifact is missing or malformed."""


def _loss_kind(cfg: ExperimentConfig) -> LossKind:
    if cfg.task == "Grad2Regression":
        return LossKind.PIXEL_MSE
    if cfg.task in CLASSIFICATION_TASKS:
        return LossKind.CROSS_ENTROPY
    return LossKind.SCALAR_MSE


def _class_key(task: str) -> str:
    return "area" if task.startswith("Area") else "perimeter"


# --- generate ----------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig, out_dir) -> Path:
    """Generate the configured dataset into ``out_dir`` and return the path."""
    ds = cfg.dataset
    total = ds.train + ds.val + ds.test
    if ds.generator == "digits":
        samples = make_grad_samples(synthetic_digits(cfg.seed, total), cfg.seed)
    else:
        if ds.generator == "blobs":
            shapes = generate_blobs(cfg.seed, total)
        else:
            constraint = (
                ConstantArea(ds.constraint_value)
                if ds.constraint == "area"
                else ConstantPerimeter(ds.constraint_value)
            )
            shapes = generate_ellipses(cfg.seed, total, constraint, rho_range=(1.0, ds.rho_max))
        if cfg.task in CLASSIFICATION_TASKS:
            shapes = assign_classes(shapes, _class_key(cfg.task))
        if ds.noise > 0:
            shapes = [
                add_noise(s, ds.noise, sample_stream(cfg.seed, i, "noise"))
                for i, s in enumerate(shapes)
            ]
        samples = shapes
    splits = {
        "train": (0, ds.train),
        "val": (ds.train, ds.train + ds.val),
        "test": (ds.train + ds.val, total),
    }
    params = {
        "config": config_hash(cfg),
        "seed": str(cfg.seed),
        "task": cfg.task,
        "generator": ds.generator,
    }
    out = Path(out_dir)
    save_dataset(out, samples, params, splits)
    return out


def load_split(cfg: ExperimentConfig, dataset_dir, split: str) -> Batch:
    try:
        samples, _, splits = load_dataset(dataset_dir)
    except FileNotFoundError as exc:
        raise ArtifactError(f"dataset not found: {exc}") from None
    except ValueError as exc:
        raise ArtifactError(f"unreadable dataset: {exc}") from None
    if split not in splits:
        raise ArtifactError(f"dataset has no {split!r} split")
    lo, hi = splits[split]
    part = samples[lo:hi]
    if not part:
        raise ArtifactError(f"split {split!r} is empty")
    if isinstance(part[0], GradSample):
        return Batch(
            np.stack([s.input.data for s in part]),
            np.stack([s.target.data for s in part]),
        )
    inputs = np.stack([s.image.data for s in part])
    if cfg.task in CLASSIFICATION_TASKS:
        labels = [s.class_label for s in part]
        if any(lab is None for lab in labels):
            raise ArtifactError("classification task on a dataset without class labels")
        return Batch(inputs, np.array(labels, dtype=int))
    key = _class_key(cfg.task)
    return Batch(inputs, np.array([[getattr(s, key)] for s in part]))


# --- train -------------------------------------------------------------------


def init_model(cfg: ExperimentConfig, init_batch: np.ndarray):
    if cfg.model_kind == "lon":
        activation = Activation.GAUSS_BELL
        n_bins = cfg.n_bins
    else:
        activation = (
            Activation.LOGISTIC_SIGMOID if cfg.activation == "sigmoid" else Activation.RELU
        )
        n_bins = 1
    return init_layer(
        cfg.model_kind,
        n_kernels=cfg.n_kernels,
        n_bins=n_bins,
        kernel_side=cfg.kernel_side,
        activation=activation,
        head_kind=cfg.head,
        out_dim=cfg.out_dim,
        image_shape=init_batch.shape[1:] if cfg.head == "dense" else None,
        init_batch=init_batch,
        rng=named_stream(cfg.seed, "init"),
        sigma_learnable=cfg.sigma_learnable,
    )


def _lr_tag(lr: float) -> str:
    return f"{lr:g}".replace("-", "m")


def _write_metrics_csv(path, rows, digest: str) -> None:
    with open(path, "w", newline="") as f:
        f.write(f"# config={digest}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["epoch", "split", "loss", "accuracy"])
        for r in rows:
            writer.writerow(
                [r.epoch, r.split, repr(float(r.loss)), "" if r.accuracy is None else repr(float(r.accuracy))]
            )


@dataclass
class RunReport:
    config_hash: str
    param_counts: dict
    runs: list
    best_lr: float | None
    best_checkpoint: str | None
    wall_clock_s: float


def run_training(cfg: ExperimentConfig, dataset_dir, out_dir) -> RunReport:
    """One training run per learning rate; the best-by-validation wins.

    A diverging run is recorded as failed (with its last finite
    parameters checkpointed) without stopping the remaining rates.
    """
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    kind = _loss_kind(cfg)
    train_batch = load_split(cfg, dataset_dir, "train")
    val_batch = load_split(cfg, dataset_dir, "val") if cfg.dataset.val else None

    runs = []
    counts = None
    for lr in cfg.lr:
        layer = init_model(cfg, train_batch.inputs)
        counts = count_params(layer)
        tag = _lr_tag(lr)
        ckpt = out / f"checkpoint_lr{tag}.lonc"
        metrics_path = out / f"metrics_lr{tag}.csv"
        record = {
            "lr": lr,
            "status": "ok",
            "checkpoint": str(ckpt),
            "metrics_csv": str(metrics_path),
        }
        try:
            rows = train_model(
                layer,
                train_batch,
                loss_kind=kind,
                epochs=cfg.epochs,
                batch_size=cfg.batch,
                lr=lr,
                shuffle_rng=named_stream(cfg.seed, "data_order"),
                val_data=val_batch,
            )
        except TrainingDiverged as exc:
            record["status"] = "diverged"
            record["error"] = str(exc)
            rows = exc.metrics or []
        _write_metrics_csv(metrics_path, rows, digest)
        save_checkpoint(layer, ckpt)
        for split in ("train", "val"):
            tail = [r for r in rows if r.split == split]
            if tail:
                record[f"final_{split}_loss"] = tail[-1].loss
                if tail[-1].accuracy is not None:
                    record[f"final_{split}_accuracy"] = tail[-1].accuracy
        runs.append(record)

    ok = [r for r in runs if r["status"] == "ok"]
    if not ok:
        raise TrainingDiverged("every learning rate diverged; see the run records")
    select = "val" if val_batch is not None else "train"
    if kind is LossKind.CROSS_ENTROPY:
        best = max(ok, key=lambda r: r.get(f"final_{select}_accuracy", -np.inf))
    else:
        best = min(ok, key=lambda r: r.get(f"final_{select}_loss", np.inf))

    report = RunReport(
        config_hash=digest,
        param_counts=counts,
        runs=runs,
        best_lr=best["lr"],
        best_checkpoint=best["checkpoint"],
        wall_clock_s=time.perf_counter() - t0,
    )
    with open(out / "report.json", "w") as f:
        json.dump(report.__dict__, f, indent=2, sort_keys=True)
        f.write("\n")
    return report


# --- eval --------------------------------------------------------------------


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ArtifactError(str(exc)) from None
    except ValueError as exc:
        raise ArtifactError(f"unreadable checkpoint {path}: {exc}") from None


def run_eval(cfg: ExperimentConfig, checkpoint, dataset_dir, out_dir, split: str = "test"):
    """Deterministic metrics plus a per-sample prediction dump."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    layer = _load_checkpoint(checkpoint)
    batch = load_split(cfg, dataset_dir, split)
    kind = _loss_kind(cfg)
    loss, accuracy = evaluate(layer, batch, kind)

    dump = out / f"predictions_{split}.csv"
    with open(dump, "w", newline="") as f:
        f.write(f"# config={digest}\n")
        writer = csv.writer(f, lineterminator="\n")
        if kind is LossKind.CROSS_ENTROPY:
            writer.writerow(["index", "target", "predicted"])
        elif kind is LossKind.SCALAR_MSE:
            writer.writerow(["index", "target", "predicted"])
        else:
            writer.writerow(["index", "mse"])
        for start in range(0, len(batch), 256):
            sel = slice(start, min(start + 256, len(batch)))
            out_vals, _ = forward_batch(layer, batch.inputs[sel])
            for i in range(out_vals.shape[0]):
                idx = start + i
                if kind is LossKind.CROSS_ENTROPY:
                    writer.writerow(
                        [idx, int(batch.targets[idx]), int(np.argmax(out_vals[i]))]
                    )
                elif kind is LossKind.SCALAR_MSE:
                    writer.writerow(
                        [idx, repr(float(batch.targets[idx, 0])), repr(float(out_vals[i, 0]))]
                    )
                else:
                    mse = float(np.mean((out_vals[i] - batch.targets[idx]) ** 2))
                    writer.writerow([idx, repr(float(mse))])

    with open(out / f"eval_{split}.csv", "w", newline="") as f:
        f.write(f"# config={digest}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["split", "loss", "accuracy", "params_formula", "params_actual"])
        counts = count_params(layer)
        writer.writerow(
            [
                split,
                repr(float(loss)),
                "" if accuracy is None else repr(float(accuracy)),
                counts["formula"],
                counts["actual"],
            ]
        )
    return loss, accuracy


# --- saliency ----------------------------------------------------------------


def run_saliency(cfg: ExperimentConfig, checkpoint, dataset_dir, ids, out_dir):
    """Saliency maps for the named manifest rows, plus boundary statistics.

    Maps land as LONR rasters with min-max normalized PGM previews; the
    sidecar CSV records each preview's normalization constants, and
    boundary_mass.csv the band-concentration ratio per sample.
    """
    if cfg.task not in CLASSIFICATION_TASKS:
        raise ConfigError("saliency needs a classification task config")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    layer = _load_checkpoint(checkpoint)
    try:
        samples, _, _ = load_dataset(dataset_dir)
    except (FileNotFoundError, ValueError) as exc:
        raise ArtifactError(f"unreadable dataset: {exc}") from None

    rows = []
    previews = []
    for sid in ids:
        if not 0 <= sid < len(samples):
            raise ValueError(f"unknown sample id {sid}; dataset has rows 0..{len(samples) - 1}")
        sample = samples[sid]
        if sample.class_label is None:
            raise ValueError(f"sample {sid} has no class label")
        sal = saliency(
            layer,
            sample.image,
            sample.class_label,
            LossKind.CROSS_ENTROPY,
            sample_id=str(sid),
            model_id=digest,
        )
        write_lonr(sal.image, out / f"saliency_{sid:05d}.lonr")
        lo, hi = write_pgm(sal.image, out / f"saliency_{sid:05d}.pgm")
        previews.append([sid, repr(float(lo)), repr(float(hi))])
        ratio = boundary_mass_ratio(sal, sample.image)
        rows.append([sid, repr(float(ratio)), sal.predicted, sal.true_label])

    with open(out / "previews.csv", "w", newline="") as f:
        f.write(f"# config={digest}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["index", "pgm_lo", "pgm_hi"])
        writer.writerows(previews)
    with open(out / "boundary_mass.csv", "w", newline="") as f:
        f.write(f"# config={digest}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["index", "boundary_mass_ratio", "predicted", "true"])
        writer.writerows(rows)
    return rows


# --- gradcheck ---------------------------------------------------------------

GRADCHECK_VARIANTS = tuple(
    (kind, act, head)
    for kind, act in (
        ("lon", Activation.GAUSS_BELL),
        ("cnn", Activation.LOGISTIC_SIGMOID),
        ("cnn", Activation.RELU),
    )
    for head in ("dense", "one_by_one")
)


def run_gradcheck(out_dir=None, corrupt: bool = False):
    """Finite-difference audit of every architecture variant at 5x5 scale.

    Returns (rows, all_passed); with corrupt=True the analytic gradients
    are deliberately nudged and a healthy checker must flag every variant.
    """
    rng = np.random.default_rng(2024)
    step = 1e-5
    rows = []
    all_passed = True
    for kind, act, head in GRADCHECK_VARIANTS:
        if act is Activation.RELU:
            inputs = rng.normal(size=(2, 5, 5)) + 2.0
        else:
            inputs = rng.normal(size=(2, 5, 5))
        layer = init_layer(
            kind,
            n_kernels=2,
            n_bins=2 if kind == "lon" else 1,
            kernel_side=3,
            activation=act,
            head_kind=head,
            out_dim=3 if head == "dense" else 1,
            image_shape=(5, 5),
            init_batch=inputs,
            rng=rng,
        )
        if act is Activation.RELU:
            # keep every preactivation off the kink by a wide margin so the
            # subgradient convention cannot contaminate the comparison
            from .image import conv_same

            margin = min(
                float(np.abs(layer.biases[0, j] - conv_same(inputs, layer.kernels[j], layer.boundary)).min())
                for j in range(layer.n_kernels)
            )
            assert margin > 10 * step
        if head == "dense":
            targets = np.array([0, 2])
            loss_kind = LossKind.CROSS_ENTROPY
        else:
            targets = rng.normal(size=inputs.shape)
            loss_kind = LossKind.PIXEL_MSE
        report = gradcheck(
            layer,
            inputs,
            targets,
            loss_kind,
            step=step,
            corrupt_analytic=0.05 if corrupt else 0.0,
        )
        name = f"{kind}-{act.name.lower()}-{head}"
        detected = not report.passed
        ok = detected if corrupt else report.passed
        all_passed = all_passed and ok
        for fname, err in sorted(report.max_rel_error.items()):
            rows.append([name, fname, repr(float(err)), "pass" if err < report.tolerance else "FAIL"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "gradcheck.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["variant", "field", "max_rel_error", "status"])
            writer.writerows(rows)
    return rows, all_passed


# --- probe -------------------------------------------------------------------


def run_probe(cfg: ExperimentConfig, out_dir, image_path=None):
    """Local-histogram probe at one pixel, written as a bias/value CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    if image_path is not None:
        from .image import read_lonr

        try:
            img = read_lonr(image_path)
        except FileNotFoundError as exc:
            raise ArtifactError(str(exc)) from None
        except ValueError as exc:
            raise ArtifactError(f"unreadable image {image_path}: {exc}") from None
    elif cfg.dataset.generator == "digits":
        img = synthetic_digits(cfg.seed, 1)[0]
    else:
        img = generate_blobs(cfg.seed, 1)[0].image

    pb = cfg.probe
    y, x = pb.position
    h, w = img.data.shape
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"probe position {pb.position} outside the {h}x{w} image")
    kernel = identity_kernel() if pb.kernel_scale == 0 else gaussian_kernel(pb.kernel_scale)
    grid = np.linspace(pb.lo, pb.hi, pb.bins)
    stack = local_histogram(img, kernel, pb.window, grid, pb.tonal)
    probe = probe_at(stack, (y, x), grid, pb.window, pb.tonal)
    with open(out / "probe.csv", "w", newline="") as f:
        f.write(f"# config={digest}\n")
        f.write(f"# position={y},{x}\n")
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bias", "value"])
        for b, v in zip(probe.bias_grid, probe.values):
            writer.writerow([repr(float(b)), repr(float(v))])
    return probe
