"""Synthetic image-flow-mask triplets for flow-guided video salient object detection."""
from .datagen import (
    GeneratedClip,
    GeneratorConfig,
    GeometricParams,
    MotionSpec,
    SourceSample,
    generate_clip,
    geometric_clip,
    rigid_object_clip,
)
from .flow import (
    FlowStats,
    block_match_flow,
    colorize_flow,
    estimate_flow,
    flow_stats,
    read_flo,
    write_flo,
)
from .metrics import MetricReport, evaluate_dataset, f_measure, mae, s_measure
from .triplets import (
    DatasetManifest,
    MixingSpec,
    Triplet,
    build_triplets,
    dataset_stats,
    ingest_video,
    mixed_sampler,
)

__version__ = "0.1.0"
