"""Label-only membership inference on an extracted surrogate model."""

__version__ = "0.1.0"

from .data import DatasetSchema, SplitSpec, TabularDataset, load_csv, split, synth_generate  # noqa: E402
from .defenses import DefenseSpec, dp_epsilon, train_defended  # noqa: E402
from .errors import (BudgetExhausted, CalibrationError, ConfigError, ExfiltError, InvalidQuery,  # noqa: E402
                     SchemaError, TrainingError, TransportError)
from .evaluation import attack_accuracy, fidelity, roc_auc, run_experiment  # noqa: E402
from .extraction import ExtractionConfig, extract  # noqa: E402
from .mia import BoundaryEstimatorConfig, MiaThreshold, boundary_distance, calibrate_threshold  # noqa: E402
from .nn import MlpClassifier, TrainConfig, train  # noqa: E402
from .oracle import LabelOracle, RemoteOracle, serve  # noqa: E402

__all__ = [
    "BoundaryEstimatorConfig", "BudgetExhausted", "CalibrationError", "ConfigError", "DatasetSchema",
    "DefenseSpec", "ExfiltError", "ExtractionConfig", "InvalidQuery", "LabelOracle", "MiaThreshold",
    "MlpClassifier", "RemoteOracle", "SchemaError", "SplitSpec", "TabularDataset", "TrainConfig",
    "TrainingError", "TransportError", "attack_accuracy", "boundary_distance", "calibrate_threshold",
    "dp_epsilon", "extract", "fidelity", "load_csv", "roc_auc", "run_experiment", "serve", "split",
    "synth_generate", "train", "train_defended",
]
