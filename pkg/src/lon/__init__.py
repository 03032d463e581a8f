"""Locally orderless network layers with matched CNN baselines.

The package is organized around a single convolution-activation-head layer
in two flavors (bell-shaped and sigmoidal nonlinearities), its exact
analytic gradients, small data generators for shape and derivative tasks,
histogram-based analysis utilities, and an experiment command line.
"""

from .image import (
    BoundaryMode,
    DimensionError,
    Image,
    Kernel,
    convolve,
    gaussian_derivative_kernel,
    gaussian_kernel,
    identity_kernel,
    read_lonr,
    read_pgm,
    semigroup_scale,
    write_lonr,
    write_pgm,
)
from .layers import (
    Activation,
    CnnLayer,
    DenseHead,
    LonLayer,
    OneByOneHead,
    cnn_backward,
    cnn_forward,
    count_params,
    emulate_cnn_from_lon,
    init_layer,
    load_checkpoint,
    lon_backward,
    lon_forward,
    save_checkpoint,
)
from .train import (
    AdamState,
    Batch,
    GradCheckReport,
    LossKind,
    TrainingDiverged,
    adam_step,
    evaluate,
    gradcheck,
    loss_and_grad,
    train_model,
)
from .datasets import (
    ConstantArea,
    ConstantPerimeter,
    GradSample,
    IdxFormatError,
    ShapeSample,
    add_noise,
    assign_classes,
    disk_image,
    generate_blobs,
    generate_ellipses,
    label_shapes,
    load_dataset,
    load_idx,
    make_grad_samples,
    named_stream,
    sample_stream,
    save_dataset,
    save_idx,
    synthetic_digits,
)
from .analysis import (
    Grad2Result,
    HistogramProbe,
    SaliencyMap,
    area_estimator,
    boundary_mass_ratio,
    calibrate_on_disks,
    circumference_estimator,
    grad2_estimator,
    local_histogram,
    lus_expectation,
    probe_at,
    saliency,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    canonical_text,
    config_hash,
    from_toml,
    load_config,
)
from .runner import (
    ArtifactError,
    RunReport,
    build_dataset,
    run_eval,
    run_gradcheck,
    run_probe,
    run_saliency,
    run_training,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
