"""Building-footprint extraction from fused optical and surface-model rasters.

A competition-layer convolutional segmenter: an encoder-decoder network
produces per-pixel descriptors, superpixels pool them into per-segment
descriptors, and a two-row codebook classifies each segment as building
or background by feature-space distance.
"""

from .autodiff import GradTape, Tensor, grad_check
from .competition import (
    Codebook,
    CompetitionConfig,
    class_distances,
    competition_loss,
    softmin_probs,
    winner,
)
from .data import (
    Band,
    RasterStack,
    SplitSpec,
    SyntheticSceneSpec,
    TileSet,
    compute_ndvi,
    normalize,
    read_bmsr,
    split_dataset,
    stitch,
    synth_scene,
    tile,
    write_bmsr,
)
from .errors import DataError, DcnError, NumericError
from .model import (
    DcnConfig,
    DcnModel,
    build,
    embed,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .superpixel import (
    SlicParams,
    SuperpixelMap,
    broadcast_labels,
    enforce_connectivity,
    slic_segment,
    superpixel_mean,
    zscore_features,
)
from .train import (
    AdamState,
    ConfusionCounts,
    CostReport,
    TrainConfig,
    TrainHistory,
    adam_step,
    computational_cost,
    confusion,
    error_map,
    iou,
    overall_accuracy,
    report_json,
    superpixel_truth,
    train,
    write_ppm,
)

__all__ = [
    "AdamState",
    "Band",
    "Codebook",
    "CompetitionConfig",
    "ConfusionCounts",
    "CostReport",
    "DataError",
    "DcnConfig",
    "DcnError",
    "DcnModel",
    "GradTape",
    "NumericError",
    "RasterStack",
    "SlicParams",
    "SplitSpec",
    "SuperpixelMap",
    "SyntheticSceneSpec",
    "Tensor",
    "TileSet",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "broadcast_labels",
    "build",
    "class_distances",
    "competition_loss",
    "compute_ndvi",
    "computational_cost",
    "confusion",
    "embed",
    "enforce_connectivity",
    "error_map",
    "forward",
    "grad_check",
    "iou",
    "load_checkpoint",
    "normalize",
    "overall_accuracy",
    "read_bmsr",
    "report_json",
    "save_checkpoint",
    "slic_segment",
    "softmin_probs",
    "split_dataset",
    "stitch",
    "superpixel_mean",
    "superpixel_truth",
    "synth_scene",
    "tile",
    "train",
    "winner",
    "write_bmsr",
    "write_ppm",
    "zscore_features",
]

__version__ = "0.1.0"
