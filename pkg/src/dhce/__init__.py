"""Dynamic hypergraph models of chronic and acute disease progression for next-visit diagnosis prediction."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .ehr import DataError, Dataset, DiseaseVocabulary, SynthConfig, generate_synthetic, load_dataset, split_dataset
from .harness import TrainConfig, evaluate, predict_next, train
from .hypergraph import build_dynamic_hypergraph, partition_diseases
from .metrics import precision_at_k
from .model import DHCE, HyperParams

__all__ = [
    "Checkpoint",
    "DHCE",
    "DataError",
    "Dataset",
    "DiseaseVocabulary",
    "HyperParams",
    "SynthConfig",
    "TrainConfig",
    "build_dynamic_hypergraph",
    "evaluate",
    "generate_synthetic",
    "load_checkpoint",
    "load_dataset",
    "partition_diseases",
    "precision_at_k",
    "predict_next",
    "save_checkpoint",
    "split_dataset",
    "train",
]
