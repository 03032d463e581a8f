"""Experiment configuration: TOML parsing, validation, canonical hashing.

Configs are TOML files with a flat top level plus [model], [train],
[dataset], and optional [probe] tables.  Two files that parse to the same
values share one canonical text and therefore one hash, regardless of
comments, key order, or number spelling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

TASKS = (
    "Grad2Regression",
    "AreaRegression",
    "PerimeterRegression",
    "AreaClassification",
    "PerimeterClassification",
)
CLASSIFICATION_TASKS = ("AreaClassification", "PerimeterClassification")
CNN_ACTIVATIONS = ("sigmoid", "relu")
GENERATORS = ("blobs", "ellipses", "digits")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class DatasetSpec:
    generator: str
    train: int
    val: int
    test: int
    noise: float = 0.0
    constraint: str | None = None
    constraint_value: float | None = None
    rho_max: float = 3.0


@dataclass(frozen=True)
class ProbeSpec:
    position: tuple[int, int] = (64, 64)
    bins: int = 32
    lo: float = -0.5
    hi: float = 1.5
    tonal: float = 0.1
    window: float = 2.0
    kernel_scale: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    model_kind: str
    n_kernels: int
    n_bins: int = 1
    activation: str = "relu"
    head: str = "dense"
    kernel_side: int = 5
    sigma_learnable: bool = True
    epochs: int = 100
    batch: int = 256
    lr: tuple[float, ...] = (1e-3, 5e-4)
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=lambda: DatasetSpec("blobs", 1500, 500, 1000))
    probe: ProbeSpec = field(default_factory=ProbeSpec)

    @property
    def out_dim(self) -> int:
        return 3 if self.task in CLASSIFICATION_TASKS else 1


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(cfg.task in TASKS, f"unknown task {cfg.task!r}; expected one of {TASKS}")
    _require(cfg.model_kind in ("lon", "cnn"), f"unknown model kind {cfg.model_kind!r}")
    _require(cfg.n_kernels >= 1, "model.kernels must be positive")
    _require(cfg.kernel_side >= 1 and cfg.kernel_side % 2 == 1, "kernel side must be odd and positive")
    _require(cfg.epochs >= 0, "train.epochs must be non-negative")
    _require(cfg.batch >= 1, "train.batch must be positive")
    _require(len(cfg.lr) > 0, "train.lr must list at least one rate")
    _require(all(r >= 0 for r in cfg.lr), "learning rates must be non-negative")
    if cfg.model_kind == "lon":
        _require(cfg.n_bins >= 1, "model.bins must be positive for lon models")
    # a bad activation name is a typo even when the model ignores it
    _require(
        cfg.activation in CNN_ACTIVATIONS,
        f"activation must be one of {CNN_ACTIVATIONS}, got {cfg.activation!r}",
    )
    _require(cfg.head in ("dense", "one_by_one"), f"unknown head {cfg.head!r}")
    if cfg.task == "Grad2Regression":
        _require(cfg.kernel_side == 3, "Grad2Regression fixes kernel side 3")
        _require(cfg.head == "one_by_one", "Grad2Regression fixes the one_by_one head")
        _require(cfg.dataset.generator == "digits", "Grad2Regression runs on the digits generator")
    else:
        _require(
            cfg.dataset.generator in ("blobs", "ellipses"),
            f"{cfg.task} needs a shape generator (blobs or ellipses)",
        )
    ds = cfg.dataset
    _require(ds.generator in GENERATORS, f"unknown generator {ds.generator!r}")
    _require(ds.train >= 1 and ds.val >= 0 and ds.test >= 1, "dataset counts must be positive")
    _require(ds.noise >= 0, "dataset.noise must be non-negative")
    if ds.generator == "ellipses":
        _require(
            ds.constraint in ("area", "perimeter"),
            "ellipses need dataset.constraint = 'area' or 'perimeter'",
        )
        _require(
            ds.constraint_value is not None and ds.constraint_value > 0,
            "ellipses need a positive dataset.constraint_value",
        )
        _require(ds.rho_max >= 1.0, "dataset.rho_max must be at least 1")
    if cfg.task in CLASSIFICATION_TASKS:
        _require(ds.train + ds.val + ds.test >= 3, "classification needs at least 3 samples")
    return cfg


def _table(raw: dict, name: str) -> dict:
    sub = raw.get(name, {})
    if not isinstance(sub, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sub)


def _pop(table: dict, key: str, kind, default=None, required=False, where=""):
    if key not in table:
        if required:
            raise ConfigError(f"missing required key {where}{key}")
        return default
    value = table.pop(key)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"{where}{key} has the wrong type: {value!r}")
    return value


def from_toml(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from None

    top = dict(raw)
    model = _table(top, "model")
    train = _table(top, "train")
    dataset = _table(top, "dataset")
    probe = _table(top, "probe")
    for name in ("model", "train", "dataset", "probe"):
        top.pop(name, None)

    task = _pop(top, "task", str, required=True)
    seed = _pop(top, "seed", int, default=0)
    if top:
        raise ConfigError(f"unknown top-level keys: {sorted(top)}")

    kind = _pop(model, "kind", str, required=True, where="model.")
    is_grad2 = task == "Grad2Regression"
    cfg = ExperimentConfig(
        task=task,
        model_kind=kind,
        n_kernels=_pop(model, "kernels", int, required=True, where="model."),
        n_bins=_pop(model, "bins", int, default=1, where="model."),
        activation=_pop(model, "activation", str, default="relu", where="model."),
        head=_pop(model, "head", str, default="one_by_one" if is_grad2 else "dense", where="model."),
        kernel_side=_pop(model, "kernel_side", int, default=3 if is_grad2 else 5, where="model."),
        sigma_learnable=_pop(model, "sigma_learnable", bool, default=True, where="model."),
        epochs=_pop(train, "epochs", int, default=100, where="train."),
        batch=_pop(train, "batch", int, default=256, where="train."),
        lr=tuple(_pop(train, "lr", list, default=[1e-3, 5e-4], where="train.")),
        seed=seed,
        dataset=DatasetSpec(
            generator=_pop(dataset, "generator", str, default="digits" if is_grad2 else "blobs", where="dataset."),
            train=_pop(dataset, "train", int, default=4096 if is_grad2 else 1500, where="dataset."),
            val=_pop(dataset, "val", int, default=512 if is_grad2 else 500, where="dataset."),
            test=_pop(dataset, "test", int, default=512 if is_grad2 else 1000, where="dataset."),
            noise=_pop(dataset, "noise", float, default=0.0, where="dataset."),
            constraint=_pop(dataset, "constraint", str, where="dataset."),
            constraint_value=_pop(dataset, "constraint_value", float, where="dataset."),
            rho_max=_pop(dataset, "rho_max", float, default=3.0, where="dataset."),
        ),
        probe=ProbeSpec(
            position=tuple(_pop(probe, "position", list, default=[64, 64], where="probe.")),
            bins=_pop(probe, "bins", int, default=32, where="probe."),
            lo=_pop(probe, "lo", float, default=-0.5, where="probe."),
            hi=_pop(probe, "hi", float, default=1.5, where="probe."),
            tonal=_pop(probe, "tonal", float, default=0.1, where="probe."),
            window=_pop(probe, "window", float, default=2.0, where="probe."),
            kernel_scale=_pop(probe, "kernel_scale", float, default=1.0, where="probe."),
        ),
    )
    for leftover, where in ((model, "model"), (train, "train"), (dataset, "dataset"), (probe, "probe")):
        if leftover:
            raise ConfigError(f"unknown keys in [{where}]: {sorted(leftover)}")
    if not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in cfg.lr):
        raise ConfigError("train.lr must be a list of numbers")
    cfg = replace(cfg, lr=tuple(float(r) for r in cfg.lr))
    return validate(cfg)


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as f:
        cfg = from_toml(f.read())
    if seed_override is not None:
        cfg = validate(replace(cfg, seed=seed_override))
    return cfg


def canonical_text(cfg: ExperimentConfig) -> str:
    """Deterministic serialization; the hash input.

    Floats are rendered with repr, which round-trips exactly, so equal
    configs produce equal text on any machine.
    """

    def fmt(value):
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, float):
            return repr(value)
        if isinstance(value, (list, tuple)):
            return "[" + ", ".join(fmt(v) for v in value) + "]"
        if isinstance(value, str):
            return f'"{value}"'
        return str(value)

    ds, pb = cfg.dataset, cfg.probe
    lines = [
        f"task = {fmt(cfg.task)}",
        f"seed = {cfg.seed}",
        "[model]",
        f"kind = {fmt(cfg.model_kind)}",
        f"kernels = {cfg.n_kernels}",
        f"bins = {cfg.n_bins}",
        f"activation = {fmt(cfg.activation)}",
        f"head = {fmt(cfg.head)}",
        f"kernel_side = {cfg.kernel_side}",
        f"sigma_learnable = {fmt(cfg.sigma_learnable)}",
        "[train]",
        f"epochs = {cfg.epochs}",
        f"batch = {cfg.batch}",
        f"lr = {fmt(cfg.lr)}",
        "[dataset]",
        f"generator = {fmt(ds.generator)}",
        f"train = {ds.train}",
        f"val = {ds.val}",
        f"test = {ds.test}",
        f"noise = {fmt(ds.noise)}",
        f"constraint = {fmt(ds.constraint) if ds.constraint else 'none'}",
        f"constraint_value = {fmt(ds.constraint_value) if ds.constraint_value is not None else 'none'}",
        f"rho_max = {fmt(ds.rho_max)}",
        "[probe]",
        f"position = {fmt(list(pb.position))}",
        f"bins = {pb.bins}",
        f"lo = {fmt(pb.lo)}",
        f"hi = {fmt(pb.hi)}",
        f"tonal = {fmt(pb.tonal)}",
        f"window = {fmt(pb.window)}",
        f"kernel_scale = {fmt(pb.kernel_scale)}",
    ]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:16]
