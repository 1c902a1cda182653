"""Feature-map extractor for the irbench retrieval engine."""

from .extract import (
    extract,
    find_images,
    load_query_bboxes,
    locate_image,
    preprocess,
    recalibrate_bn,
)
from .fmap import write_fmap
from .models import (
    MODELS,
    AmdimStandin,
    CheckpointMismatchError,
    LoadedModel,
    ModelSpec,
    WidthScaledResNet,
    bn_stats_hash,
    load_model,
    sha256_file,
)

__version__ = "0.1.0"

__all__ = [
    "AmdimStandin",
    "CheckpointMismatchError",
    "LoadedModel",
    "MODELS",
    "ModelSpec",
    "WidthScaledResNet",
    "bn_stats_hash",
    "extract",
    "find_images",
    "load_model",
    "load_query_bboxes",
    "locate_image",
    "preprocess",
    "recalibrate_bn",
    "sha256_file",
    "write_fmap",
]
