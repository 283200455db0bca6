"""Hierarchical multi-scenario multi-task recommendation on a small autodiff core."""
from ._kernels import BACKEND
from .datagen import Dataset, GeneratorConfig, generate
from .metrics import EvalReport, auc, evaluate, friedman
from .models import ABLATIONS, HiNet, HiNetConfig, MMoE, SharedBottom, build_model
from .trainer import TrainConfig, train

__all__ = ["ABLATIONS", "BACKEND", "Dataset", "EvalReport", "GeneratorConfig", "HiNet", "HiNetConfig", "MMoE",
           "SharedBottom", "TrainConfig", "auc", "build_model", "evaluate", "friedman", "generate", "train"]
__version__ = "0.1.0"
