"""Classifier-ensemble uncertainty calibration.

Train several seeded linear heads on frozen features, combine them by
averaging, majority voting or a small trainable combiner model, and measure
calibration with the expected and maximum calibration error.
"""

__version__ = "0.1.0"

from .combiners import (
    KINDS,
    HeadOutputs,
    Metamodel,
    MetaTrainConfig,
    build_metamodel,
    combine_average,
    combine_metamodel,
    combine_vote,
    load_metamodel,
    metamodel_forward,
    param_count,
    save_metamodel,
    train_metamodel,
)
from .data import (
    FeatureDataset,
    MiscalSpec,
    SynthSpec,
    import_csv,
    load_dataset,
    load_probs,
    save_dataset,
    save_probs,
    split,
    synth_clusters,
    synth_miscalibrated_predictions,
)
from .errors import (
    CalibensError,
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    LabelError,
    StratificationError,
    TrainingError,
)
from .heads import (
    HeadTrainConfig,
    LinearHead,
    head_predict,
    init_head,
    load_head,
    save_head,
    train_head,
    train_head_family,
)
from .metrics import (
    BinStats,
    CalibrationReport,
    PredictionSet,
    accuracy,
    assign_bin,
    calibration_report,
    ece,
    mce,
    predictions_from_probs,
    reliability_bins,
    write_reliability_csv,
)
from .numerics import (
    EarlyStopper,
    PlateauScheduler,
    RngStream,
    SgdState,
    derive_seed,
    sgd_step,
    softmax,
)

__all__ = [
    "__version__",
    "KINDS",
    "HeadOutputs",
    "Metamodel",
    "MetaTrainConfig",
    "build_metamodel",
    "combine_average",
    "combine_metamodel",
    "combine_vote",
    "load_metamodel",
    "metamodel_forward",
    "param_count",
    "save_metamodel",
    "train_metamodel",
    "FeatureDataset",
    "MiscalSpec",
    "SynthSpec",
    "import_csv",
    "load_dataset",
    "load_probs",
    "save_dataset",
    "save_probs",
    "split",
    "synth_clusters",
    "synth_miscalibrated_predictions",
    "CalibensError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "FormatError",
    "LabelError",
    "StratificationError",
    "TrainingError",
    "HeadTrainConfig",
    "LinearHead",
    "head_predict",
    "init_head",
    "load_head",
    "save_head",
    "train_head",
    "train_head_family",
    "BinStats",
    "CalibrationReport",
    "PredictionSet",
    "accuracy",
    "assign_bin",
    "calibration_report",
    "ece",
    "mce",
    "predictions_from_probs",
    "reliability_bins",
    "write_reliability_csv",
    "EarlyStopper",
    "PlateauScheduler",
    "RngStream",
    "SgdState",
    "derive_seed",
    "sgd_step",
    "softmax",
]
