"""Reinforced intra-attention abstractive summarization."""
from .estimator import Summarizer
from .forward import SummaryModel
from .training import TrainingConfig, evaluate, train

__all__ = ["Summarizer", "SummaryModel", "TrainingConfig", "evaluate", "train"]
__version__ = "0.1.0"
