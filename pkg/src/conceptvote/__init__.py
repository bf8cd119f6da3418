"""Visual-concept learning and occlusion-robust part detection by voting."""

from .concepts import (
    Assignment,
    ConceptBank,
    activation_histogram,
    davies_bouldin,
    encode_sparse,
    kmeans_fit,
    merge_by_db,
    mixture_cost,
    vmf_e_step,
    vmf_fit,
    vmf_m_step,
)
from .evaluation import (
    BenchmarkConfig,
    BenchmarkReport,
    PRCurve,
    average_precision,
    evaluate_concept,
    match_iou,
    match_keypoint,
    occlusion_benchmark,
)
from .features import (
    OCCLUSION_LEVELS,
    AnnotationSet,
    FeatureMap,
    SyntheticWorld,
    apply_occlusion,
    generate_scene,
    normalize_in_place,
    read_annotations,
    read_feature_map,
    sample_vectors,
    write_annotations,
    write_feature_map,
)
from .lattice import LatticeSpec, disk_neighborhood, map_down, map_up
from .likelihood import (
    EvidenceEntry,
    EvidenceModel,
    VoterSet,
    estimate_histograms,
    fit_evidence_model,
    lambda_of,
    select_voters,
)
from .spatial import (
    SpatialEntry,
    SpatialModel,
    best_offset,
    fit_frequency,
    fit_spatial_model,
    support_from_frequency,
)
from .voting import (
    Detection,
    VoteField,
    VotingModels,
    detect,
    multi_scale_detect,
    nms_detections,
    nms_grid,
    score_map,
    vote_map,
)

__version__ = "0.1.0"
