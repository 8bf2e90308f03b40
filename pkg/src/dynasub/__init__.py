"""Dynamic subgrouping VAE with regret-based OOD detection on simulated 2-D data."""
from .datagen import Dataset, drop_class, make_dataset
from .metrics import MetricsReport
from .trainer import DynaSubModel, RunConfig, train

__all__ = ["Dataset", "DynaSubModel", "MetricsReport", "RunConfig", "drop_class", "make_dataset", "train"]
__version__ = "0.1.0"
