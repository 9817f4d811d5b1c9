"""Scribble-supervised segmentation lab.

A UNet whose decoder stages predict auxiliary masks and gate their own
features on the predicted background, trained with partial cross-entropy
on scribbles plus a self-generated multi-scale consistency loss; with the
synthetic-data, weak-label, metric and experiment machinery around it.
"""

from .datakit import (
    UNLABELED,
    CorruptDataError,
    DatasetSplit,
    Image,
    LabelMap,
    Sample,
    Scribble,
    SyntheticSpec,
    crop_or_pad,
    generate_synthetic_dataset,
    generate_synthetic_sample,
    load_dataset,
    normalize_median_iqr,
    save_dataset,
    split_patients,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    compactness_loss,
    dynamic_weight,
    pce_loss,
    self_consistency_loss,
    total_loss,
)
from .metrics import MetricsReport, build_report, dice, hausdorff, iou, wilcoxon_signed_rank
from .model import (
    ModelConfig,
    PyagUNet,
    PyramidPrediction,
    build_model,
    downsample_target,
    load_checkpoint,
    save_checkpoint,
)
from .scribbles import ScribbleConfig, background_scribble, foreground_scribble, synthesize_scribbles
from .trainer import ConfigurationError, TrainConfig, evaluate, predict, train

__version__ = "0.1.0"
