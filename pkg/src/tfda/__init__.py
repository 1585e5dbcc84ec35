"""Source-free domain adaptation for time series with a time/frequency dual-branch network."""

from .data import DEFAULT_SHIFT, Dataset, DatasetMeta, ShiftSpec, generate_synthetic, load_dataset, make_benchmark, save_dataset
from .metrics import MetricsReport, macro_f1
from .model import Arch, DualBranchModel, build_model, load_model, predict, pretrain_source, save_model
from .trainer import AdaptConfig, AdaptReport, evaluate, run_adaptation

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AdaptReport", "Arch", "DEFAULT_SHIFT", "Dataset", "DatasetMeta", "DualBranchModel",
    "MetricsReport", "ShiftSpec", "build_model", "evaluate", "generate_synthetic", "load_dataset", "load_model",
    "macro_f1", "make_benchmark", "predict", "pretrain_source", "run_adaptation", "save_dataset", "save_model",
]
