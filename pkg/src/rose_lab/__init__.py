"""Desk-scale general time-series forecasting with decomposed frequency learning and a domain register."""
from rose_lab.data import Dataset, SeriesWindow, SyntheticSpec, load_csv, make_windows, normalize_window
from rose_lab.evaluation import EvalReport, evaluate, register_report
from rose_lab.model import ModelConfig, RoseModel
from rose_lab.train import TrainConfig, finetune, forecast, pretrain, zero_shot_forecast

__all__ = [
    "Dataset", "SeriesWindow", "SyntheticSpec", "load_csv", "make_windows", "normalize_window",
    "EvalReport", "evaluate", "register_report",
    "ModelConfig", "RoseModel", "TrainConfig", "finetune", "forecast", "pretrain", "zero_shot_forecast",
]
__version__ = "0.1.0"
