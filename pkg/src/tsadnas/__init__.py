"""Genome-configurable transformer anomaly detection with NSGA-II architecture search."""

from .dataset import TimeSeriesDataset, SynthSpec, load_csv, normalize, synth_generate
from .genome import Genome, sample_genome
from .model import AnomalyModel, build
from .nas import SearchBudget, run_search, select_from_front
from .pipeline import ScoringConfig, detect, train_and_evaluate
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "AnomalyModel",
    "Genome",
    "ScoringConfig",
    "SearchBudget",
    "SynthSpec",
    "TimeSeriesDataset",
    "TrainConfig",
    "build",
    "detect",
    "fit",
    "load_csv",
    "normalize",
    "run_search",
    "sample_genome",
    "select_from_front",
    "synth_generate",
    "train_and_evaluate",
]
