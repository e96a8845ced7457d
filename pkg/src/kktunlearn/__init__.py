"""Unlearning verification by reconstructing training data from weights."""

from .diffnet import NetworkSpec
from .data_io import LabeledDataset
from .reconstruct import CandidateSet, ReconstructConfig
from .trainer import TrainConfig, UnlearnRequest
from .verify import SsimConfig, VerifyConfig

__all__ = [
    "CandidateSet",
    "LabeledDataset",
    "NetworkSpec",
    "ReconstructConfig",
    "SsimConfig",
    "TrainConfig",
    "UnlearnRequest",
    "VerifyConfig",
]
