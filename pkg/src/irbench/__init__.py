"""Instance image retrieval engine and benchmark harness.

Turns pre-extracted convolutional feature maps into compact R-MAC
descriptors, post-processes them (L2 / PCA-whitening / L2), ranks databases
under global search combined with query expansion, database augmentation and
graph diffusion, and scores the results with classic and revisited
mAP / mp@k protocols.
"""

from .aggregation import Region, downsample, region_mac, rmac, rmac_regions
from .evaluation import (
    EvalReport,
    average_precision,
    evaluate,
    precision_at_k,
    revisited_setup,
)
from .postprocess import (
    WhiteningModel,
    apply_whitening,
    ensemble_concat,
    fit_whitening,
    l2_normalize,
    l2_normalize_rows,
    post_process,
    read_whitening,
    write_whitening,
)
from .ranking import (
    DiffusionGraph,
    PipelineSpec,
    RankedList,
    aqe,
    build_diffusion_graph,
    conjugate_gradient,
    dba,
    diffuse,
    global_search,
    parse_pipeline,
    run_pipeline,
    solve_diffusion,
    write_rankings_tsv,
)
from .tensor_io import (
    DescriptorSet,
    FeatureMap,
    FormatError,
    GroundTruth,
    GroundTruthError,
    QueryGroundTruth,
    parse_generic_groundtruth,
    parse_oxford_groundtruth,
    read_dset,
    read_fmap,
    write_dset,
    write_fmap,
)

__version__ = "0.1.0"

__all__ = [
    "DescriptorSet",
    "DiffusionGraph",
    "EvalReport",
    "FeatureMap",
    "FormatError",
    "GroundTruth",
    "GroundTruthError",
    "PipelineSpec",
    "QueryGroundTruth",
    "RankedList",
    "Region",
    "WhiteningModel",
    "apply_whitening",
    "aqe",
    "average_precision",
    "build_diffusion_graph",
    "conjugate_gradient",
    "dba",
    "diffuse",
    "downsample",
    "ensemble_concat",
    "evaluate",
    "fit_whitening",
    "global_search",
    "l2_normalize",
    "l2_normalize_rows",
    "parse_generic_groundtruth",
    "parse_oxford_groundtruth",
    "parse_pipeline",
    "post_process",
    "precision_at_k",
    "read_dset",
    "read_fmap",
    "read_whitening",
    "region_mac",
    "revisited_setup",
    "rmac",
    "rmac_regions",
    "run_pipeline",
    "solve_diffusion",
    "write_dset",
    "write_fmap",
    "write_rankings_tsv",
    "write_whitening",
]
