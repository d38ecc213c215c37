"""Change-point detection from the CUSUM of estimated log density ratios.

Split a series at any index, learn ``w = p_left / p_right`` from the two
halves, and accumulate ``log w`` over time: the running sum rises while the
data resemble the left half and falls once they resemble the right half, so
change points appear as slope changes of the statistic.
"""

from .core import (
    BoundsError,
    ChangePointEstimate,
    DataError,
    DegenerateProblemError,
    GroundTruth,
    RandomSource,
    SplitConfig,
    TimeSeries,
    TrainingError,
    read_series_csv,
    split_geometry,
    write_series_csv,
)
from .cusum import SegmentationConfig, argmax_estimator, compute_cusum, detect_slope_changes
from .detect import (
    DetectionResult,
    EnsembleConfig,
    OnlineConfig,
    detect_multi,
    detect_single,
    ensemble_detect,
    online_detect,
    verify_change,
)
from .distributions import GaussianSpec
from .dre import KernelConfig, MlpConfig, Objective, train
from .eval import SyntheticSpec, far_mdr, generate_synthetic, match_detections, preset
from .ratios import LearnedRatio, OracleRatio

__version__ = "0.1.0"

__all__ = [
    "BoundsError", "ChangePointEstimate", "DataError", "DegenerateProblemError", "GroundTruth",
    "RandomSource", "SplitConfig", "TimeSeries", "TrainingError", "read_series_csv", "split_geometry",
    "write_series_csv", "SegmentationConfig", "argmax_estimator", "compute_cusum", "detect_slope_changes",
    "DetectionResult", "EnsembleConfig", "OnlineConfig", "detect_multi", "detect_single", "ensemble_detect",
    "online_detect", "verify_change", "GaussianSpec", "KernelConfig", "MlpConfig", "Objective", "train",
    "SyntheticSpec", "far_mdr", "generate_synthetic", "match_detections", "preset", "LearnedRatio",
    "OracleRatio",
]
