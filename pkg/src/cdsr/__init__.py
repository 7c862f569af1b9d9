"""Cross-domain sequential recommendation with signed transition graphs and
transition-masked multi-head attention."""

__version__ = "0.1.0"

from .config import TrainConfig, load_config
from .data import DatasetSplit, Interaction, SynthSpec, UserHistory, generate_synthetic
from .model import CrossDomainRecModel, init_params

__all__ = ["CrossDomainRecModel", "DatasetSplit", "Interaction", "SynthSpec", "TrainConfig", "UserHistory",
           "generate_synthetic", "init_params", "load_config"]
