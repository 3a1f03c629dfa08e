"""Multimodal latent-variable generative model with an energy-based latent prior."""
from .config import RunConfig, load_config
from .data import DatasetSpec, MultimodalDataset, generate, load_dataset, save_dataset
from .langevin import ChainTrace, LangevinConfig, run_chains
from .prior import EbmPrior, ReferenceDistribution
from .trainer import ArchSpec, ModelBundle, TrainConfig, build_model, train_loop

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "ChainTrace",
    "DatasetSpec",
    "EbmPrior",
    "LangevinConfig",
    "ModelBundle",
    "MultimodalDataset",
    "ReferenceDistribution",
    "RunConfig",
    "TrainConfig",
    "build_model",
    "generate",
    "load_config",
    "load_dataset",
    "run_chains",
    "save_dataset",
    "train_loop",
]
