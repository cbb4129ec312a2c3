"""Residual transfer networks for unsupervised domain adaptation, at desk scale."""

from .config import TrainConfig
from .data import DomainDataset, ShiftSpec, generate
from .harness import ablate, gradcheck, objective, train
from .network import Network, forward, predict

__all__ = ["DomainDataset", "Network", "ShiftSpec", "TrainConfig", "ablate", "forward",
           "generate", "gradcheck", "objective", "predict", "train"]
