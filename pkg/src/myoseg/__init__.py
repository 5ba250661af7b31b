"""Desk-scale 3D U-Net segmentation engine for uterine MRI structures.

End-to-end pipeline: a reverse-mode autodiff core, a five-level
encoder-decoder, composite Dice + cross-entropy training, NIfTI-1 I/O,
synthetic phantoms with exact ground truth, sliding-window inference and
per-class Dice reporting.
"""

__version__ = "0.1.0"

from .autodiff import (
    GradError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    clamped_log,
    concat_channels,
    conv3d,
    conv3d_transposed,
    div,
    instance_norm,
    leaky_relu,
    mul,
    scale,
    softmax_channels,
    tensor_sum,
)
from .inference import EvalConfig, evaluate_cases, predict
from .losses import LossConfig, LossInputError, ce_loss, dice_loss, one_hot, total_loss
from .metrics import CLASS_NAMES, DiceReport, aggregate, case_dice, dsc, format_report_markdown
from .nifti import LabelMap, NiftiError, Volume, read_nifti, write_nifti
from .phantom import PhantomSpec, generate
from .training import (
    Case,
    EpochStats,
    SGD,
    TrainConfig,
    TrainingDiverged,
    poly_lr,
    sample_patch,
    split_dataset,
    train,
)
from .unet import CheckpointError, UNet3D, UNetConfig, build_unet, load_checkpoint, save_checkpoint

__all__ = [
    "__version__",
    "GradError", "ShapeError", "Tape", "Tensor",
    "add", "backward", "clamped_log", "concat_channels", "conv3d", "conv3d_transposed",
    "div", "instance_norm", "leaky_relu", "mul", "scale", "softmax_channels", "tensor_sum",
    "EvalConfig", "evaluate_cases", "predict",
    "LossConfig", "LossInputError", "ce_loss", "dice_loss", "one_hot", "total_loss",
    "CLASS_NAMES", "DiceReport", "aggregate", "case_dice", "dsc", "format_report_markdown",
    "LabelMap", "NiftiError", "Volume", "read_nifti", "write_nifti",
    "PhantomSpec", "generate",
    "Case", "EpochStats", "SGD", "TrainConfig", "TrainingDiverged",
    "poly_lr", "sample_patch", "split_dataset", "train",
    "CheckpointError", "UNet3D", "UNetConfig", "build_unet", "load_checkpoint", "save_checkpoint",
]
