"""Kernel U-Net for time-series forecasting, on a small numpy autodiff core."""
from .data import SeriesTable, WindowBatch, channel_flatten, channel_unflatten, load_csv, split, windows
from .errors import ConfigError, ContractError, DataError, DimensionError, IngestError
from .kernels import KernelSpec
from .normalize import NormState
from .partition import PartitionPlan, PlanError, validate
from .tensor import Tensor, grad_check, no_grad
from .train import MetricsReport, TrainConfig, evaluate, mae, mse, repeat_last_baseline, train
from .unet import (KUNetModel, attention_cost, build, build_forecaster, count_parameters, forecast,
                   forward, load_checkpoint, save_checkpoint)

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError", "IngestError", "KUNetModel", "KernelSpec",
    "MetricsReport", "NormState", "PartitionPlan", "PlanError", "SeriesTable", "Tensor", "TrainConfig",
    "WindowBatch", "attention_cost", "build", "build_forecaster", "channel_flatten", "channel_unflatten",
    "count_parameters", "evaluate", "forecast", "forward", "grad_check", "load_checkpoint", "load_csv", "mae",
    "mse", "no_grad", "repeat_last_baseline", "save_checkpoint", "split", "train", "validate", "windows",
]
