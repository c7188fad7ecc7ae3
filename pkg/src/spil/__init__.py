"""Self-paced instance localization: mine pseudo ground-truth boxes and
masks from instance-search rank lists, plus detection-by-search for
few-shot object detection."""

from .coattention import (
    CoattentionParams,
    SegmentationParams,
    attention_map,
    coattention_pipeline,
    covariance,
    global_mean,
    principal_component,
    pseudo_mask,
    segment_superpixels,
    superpixel_scores,
)
from .datasets import Dataset, ImageStore, QueryRecord, load_dataset
from .errors import (
    CheckpointVersionError,
    DegenerateCovarianceError,
    InvalidInputError,
    SpilError,
)
from .evalkit import (
    RankEntry,
    RankList,
    average_precision,
    detection_ap,
    iou,
    mean_average_precision,
    miou,
    pooled_feature,
    recall_iou_curve,
    rerank,
    search_rank,
)
from .fewshot import Shot, propagate_labels, query_expansion, refine_category
from .localizer import (
    AnchorConfig,
    Detection,
    HeadParams,
    Target,
    detect,
    gradient_check,
    load_checkpoint,
    match_targets,
    nms,
    propose_anchors,
    save_checkpoint,
    sgd_step,
    total_loss,
)
from .selfpaced import (
    PoolEntry,
    StageConfig,
    TrainingPair,
    init_pool,
    query_swap,
    run_training,
    sample_negative_pairs,
    sample_positive_pairs,
    select_pseudo_gt,
    tau_schedule,
    update_pool,
)
from .synthgen import Jitter, SynthSpec, export, generate
from .tensor_core import (
    FeatureProviderConfig,
    avg_pool_spatial,
    depthwise_xcorr,
    extract_features,
    mean_kernel,
)

__version__ = "0.1.0"
