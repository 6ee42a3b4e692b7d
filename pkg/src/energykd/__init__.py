"""Energy-based knowledge distillation and high-energy data augmentation."""

from .energy import Bucket, energy_score, partition, rank_dataset
from .kdloss import PolicyMode, TemperaturePolicy, energy_kd_loss, total_objective

__version__ = "0.1.0"

__all__ = [
    "Bucket",
    "PolicyMode",
    "TemperaturePolicy",
    "energy_kd_loss",
    "energy_score",
    "partition",
    "rank_dataset",
    "total_objective",
]
