from .scoring import BOX_COLOR, score
from .change import (
    SignedChangeMap,
    change_concentration,
    largest_component,
    render_change_map,
    signed_change_map,
    tissue_mask,
)
from .detection import (
    MAP_THRESHOLDS,
    Box,
    average_precision,
    box_iou,
    detection_metrics,
    draw_boxes,
    greedy_match,
    mask_boxes,
    mean_average_precision,
    parse_boxes,
)
from .features import (
    DEFAULT_EXTRACTOR,
    FeatureExtractor,
    PyramidExtractor,
    fid,
    frechet_distance,
    inception_score,
    perceptual_distance,
    psd_sqrt,
)
from .fidelity import mse, psnr, ssim
from .report import MetricReport, MetricRow
from .segmentation import ConfusionCounts, class_scores, confusion, segmentation_metrics
