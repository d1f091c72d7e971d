"""Dynamic-graph classification of multivariate time series with gradient-based importance maps."""

from .data import SynthSpec, synth_generate
from .experiments import ablate, explain, ood_run
from .model import Model, ModelConfig, forward
from .train import Checkpoint, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "Model", "ModelConfig", "SynthSpec", "TrainConfig",
    "ablate", "evaluate", "explain", "forward", "ood_run", "synth_generate", "train",
]
