"""CACTUS: compression-aware certified training.

Trains small dense/convolutional networks so that interval-certified
robustness survives post-training pruning and quantization, by averaging the
certified training loss over a set of compressed views of the live weights
(pruning masks recomputed every batch, adversarial weight perturbation as a
quantization stand-in).
"""

from . import tensor
from ._kernels import BACKEND as kernel_backend
from .attack import (
    AttackConfig,
    AWPConfig,
    WeightPerturbation,
    awp_loss,
    awp_perturb,
    pgd_attack,
    sabr_centers,
    sabr_loss,
)
from .bounds import IntervalTensor, certify, ibp_forward, ibp_loss, ibp_loss_at, input_box
from .compress import (
    MaskedView,
    PruneSpec,
    PruningMask,
    QuantSpec,
    apply_mask,
    bake_mask,
    calibrate_network,
    calibrate_quant,
    compute_mask,
    lattice_round,
    quantize_values,
    quantize_weights,
    round_half_away_from_zero,
    ste_quantize,
    target_param_ids,
)
from .config import RunConfig, default_config, load_config, parse_config
from .data import Dataset, load_cifar10, load_idx, load_mnist, make_synthetic, mnist_available
from .errors import CactusError, ConfigError, DataFormatError, DivergenceError, ShapeError
from .network import (
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    Network,
    ReLU,
    WeightShiftView,
    build,
    forward,
    load_checkpoint,
    predict,
    preset_layers,
    save_checkpoint,
)
from .report import EvalReport, Variant, evaluate, materialize, parse_variant
from .tensor import Tape, Tensor, stop_recording
from .train import (
    Adam,
    CompressionSet,
    Fixed,
    Identity,
    Progressive,
    Prune,
    QuantProxy,
    Sampled,
    TrainConfig,
    cactus_loss,
    combined_loss,
    refresh_set,
    resume_train,
    schedule,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AWPConfig", "WeightPerturbation", "awp_loss", "awp_perturb",
    "pgd_attack", "sabr_centers", "sabr_loss",
    "IntervalTensor", "certify", "ibp_forward", "ibp_loss", "ibp_loss_at", "input_box",
    "MaskedView", "PruneSpec", "PruningMask", "QuantSpec", "apply_mask", "bake_mask",
    "calibrate_network", "calibrate_quant", "compute_mask", "lattice_round",
    "round_half_away_from_zero",
    "target_param_ids",
    "quantize_values", "quantize_weights", "ste_quantize",
    "RunConfig", "default_config", "load_config", "parse_config",
    "Dataset", "load_cifar10", "load_idx", "load_mnist", "make_synthetic", "mnist_available",
    "CactusError", "ConfigError", "DataFormatError", "DivergenceError", "ShapeError",
    "BatchNorm", "Conv2d", "Dense", "Flatten", "Network", "ReLU", "WeightShiftView",
    "build", "forward", "load_checkpoint", "predict", "preset_layers", "save_checkpoint",
    "EvalReport", "Variant", "evaluate", "materialize", "parse_variant",
    "Tape", "Tensor", "stop_recording",
    "Adam", "CompressionSet", "Fixed", "Identity", "Progressive", "Prune", "QuantProxy",
    "Sampled", "TrainConfig", "cactus_loss", "combined_loss", "refresh_set",
    "resume_train", "schedule", "train",
    "tensor", "kernel_backend",
]
