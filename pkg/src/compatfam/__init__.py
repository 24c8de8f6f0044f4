"""Asymmetric compatibility learning with prototype families, plus a conditional generator."""

from .compat import CompatConfig, CompatModel, pcd
from .data import DataError, ItemSet, PairSet, RelationSpec
from .evaluate import auc, error_rate, recommend_approx, recommend_exact, symmetric_auc_bound
from .gan import GanConfig, GanModel, train_mrcgan
from .train import TrainConfig, train_compat

__all__ = [
    "CompatConfig", "CompatModel", "pcd", "DataError", "ItemSet", "PairSet", "RelationSpec",
    "auc", "error_rate", "recommend_approx", "recommend_exact", "symmetric_auc_bound",
    "GanConfig", "GanModel", "train_mrcgan", "TrainConfig", "train_compat",
]

__version__ = "0.1.0"
