"""Detectors and removers evaluated against released backbones."""

from .dftnd import DFTNDConfig, df_tnd
from .neural_cleanse import NeuralCleanseConfig, anomaly_index, neural_cleanse
from .removal import UnlearnConfig, finetune, unlearn
from .strip import StripConfig, strip_detect, strip_entropies
from .verdict import DefenseVerdict

__all__ = [
    "DFTNDConfig", "DefenseVerdict", "NeuralCleanseConfig", "StripConfig", "UnlearnConfig",
    "anomaly_index", "df_tnd", "finetune", "neural_cleanse", "strip_detect", "strip_entropies", "unlearn",
]
