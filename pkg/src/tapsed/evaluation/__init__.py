from .postprocess import (
    FRAME_SECONDS,
    EventInterval,
    binarize_and_segment,
    decode_batch,
    decode_clip,
    default_thresholds,
    events_to_frames,
    median_filter,
    weak_mask,
)
from .psds import PsdsConfig, PsdsResult, classwise_f1, operating_point, psds
from .stats import anova_oneway, compare_models, ordering_string, tukey_hsd

__all__ = [
    "FRAME_SECONDS", "EventInterval", "binarize_and_segment", "decode_batch", "decode_clip",
    "default_thresholds", "events_to_frames", "median_filter", "weak_mask", "PsdsConfig",
    "PsdsResult", "classwise_f1", "operating_point", "psds", "anova_oneway", "compare_models",
    "ordering_string", "tukey_hsd",
]
