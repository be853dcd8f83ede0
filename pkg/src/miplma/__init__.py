"""Multi-instance partial-label learning with margin adjustment."""

from .data import Bag, Dataset, DatasetMeta, GenConfig, generate, read_jsonl, split, write_jsonl
from .estimator import MIPLMAClassifier
from .evalsuite import EvalReport, dump_attention, evaluate, multi_seed
from .model import ModelParams, TemperatureSchedule, init_params
from .trainer import TrainConfig, predict, train

__all__ = [
    "Bag", "Dataset", "DatasetMeta", "GenConfig", "generate", "read_jsonl", "split", "write_jsonl",
    "MIPLMAClassifier", "EvalReport", "dump_attention", "evaluate", "multi_seed",
    "ModelParams", "TemperatureSchedule", "init_params", "TrainConfig", "predict", "train",
]
__version__ = "0.1.0"
