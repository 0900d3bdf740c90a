"""Multi-scale single-shot detector with inception square/cubic modules, on a numpy autodiff engine."""
from .data import SceneSpec, SyntheticDataset, generate
from .evaluation import Detection, evaluate
from .network import MDFN, NetworkSpec, build
from .train import RunConfig, Trainer, train

__all__ = ["MDFN", "Detection", "NetworkSpec", "RunConfig", "SceneSpec", "SyntheticDataset", "Trainer", "build",
           "evaluate", "generate", "train"]
__version__ = "0.1.0"
