"""featref: featuremetric refinement for sparse Structure-from-Motion.

Two-stage refinement over dense feature patches: keypoint adjustment on
tentative match tracks before geometric estimation, and bundle adjustment of
3D points and camera poses against fixed per-track reference features
afterwards. Includes a geometric bundle adjustment baseline, COLMAP-style
model I/O, binary feature formats, and a synthetic-scene harness.
"""

from . import errors
from .bundle_adjustment import (
    BAOptions,
    BAReport,
    CostMapPatch,
    CostMapSet,
    QueryObservation,
    TrackReference,
    build_cost_maps,
    featuremetric_ba,
    geometric_ba,
    observation_references,
    refine_query_pose,
    select_reference,
    select_track_references,
    track_observation_features,
)
from .evaluate import EvalReport, error_auc, evaluate, scene_diameter
from .features import (
    DenseFeatureMap,
    FeaturePatch,
    FeaturePatchSet,
    bicubic_interpolate,
    extract_gradient_features,
    extract_ncc_intensity,
    extract_patches,
    interpolate,
)
from .io_formats import (
    read_fmap,
    read_fpat,
    read_matches,
    read_model,
    write_fmap,
    write_fpat,
    write_matches,
    write_model,
)
from .keypoint_adjustment import (
    AdjustAllResult,
    KAOptions,
    KAResult,
    adjust_all,
    adjust_query_keypoints,
    adjust_track,
)
from .matching import (
    Match,
    MatchGraph,
    TentativeTrack,
    build_graph,
    connected_components,
    extract_tracks,
    separate_tracks,
    topological_center,
)
from .optim import (
    LMOptions,
    LMProblem,
    LMResult,
    PoseBlock,
    ResidualBlock,
    RobustLoss,
    SchurSystem,
    VectorBlock,
    lm_solve,
    loss_evaluate,
    robust_mean,
    schur_solve,
)
from .scene import (
    Camera,
    Image,
    Keypoint,
    Observation,
    Point3D,
    Pose,
    Reconstruction,
    project,
    project_with_jacobians,
    reprojection_stats,
    triangulate_dlt,
)
from .synth import SynthConfig, SynthResult, load_synth_config, synth_generate

__version__ = "0.1.0"
