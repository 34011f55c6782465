"""Category-unified 3D single object tracking on point clouds, desk scale."""

__version__ = "0.1.0"

from .geometry import (
    BBox3D,
    GroupIndex,
    PointCloud,
    ball_query_topk,
    center_distance,
    crop_points_in_box,
    farthest_point_sample,
    from_canonical,
    rotated_iou_3d,
    to_canonical,
)
from .unify import (
    RegionSpec,
    denormalize_offset,
    make_fixed_margin_region,
    make_search_region,
    normalize_offset,
    sample_region_points,
    shape_aware_labels,
)
from .trackers import (
    Ablation,
    MotionTracker,
    Proposal,
    SiameseTracker,
    TrackSettings,
    TrainConfig,
    build_tracker,
    load_tracker,
    select_best_proposal,
    track_sequence,
)
from .evaluate import (
    CategoryResult,
    FrameResult,
    aggregate_weighted_mean,
    precision_metric,
    success_metric,
)
from .datasets import Sequence, SynthConfig, gen_synthetic, read_pcf, write_pcf
