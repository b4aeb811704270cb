"""Fuse pretrained single-task MLPs into one multi-task model."""
from .autograd import Adam, Parameter, Tensor
from .data import FeatureSpec, TabularEncoder, TaskDataset, ingest_csv, make_synthetic
from .deconstruct import deconstruct_pool, find_common_layers, verify_roundtrip
from .fusion import EmmConfig, EmmModel, build_emm, emm_forward, fuse_pool, train_emm
from .metrics import auc, gain_report
from .store import ModelPool, TrainedModel, load_model, save_model, train_single
from .training import CENSUS_PROFILE, LARGE_SCALE_PROFILE, TrainConfig

__all__ = [
    "Adam", "Parameter", "Tensor", "FeatureSpec", "TabularEncoder", "TaskDataset", "ingest_csv",
    "make_synthetic", "deconstruct_pool", "find_common_layers", "verify_roundtrip", "EmmConfig",
    "EmmModel", "build_emm", "emm_forward", "fuse_pool", "train_emm", "auc", "gain_report",
    "ModelPool", "TrainedModel", "load_model", "save_model", "train_single", "CENSUS_PROFILE",
    "LARGE_SCALE_PROFILE", "TrainConfig",
]
__version__ = "0.1.0"
