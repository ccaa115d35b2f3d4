"""Per-pixel mixture-of-experts depth heads, trained and evaluated at desk scale."""

from .kernels import BACKEND
from .mixture import GateField, LossConfig, MixtureOutput, gate_softmax, gating_entropy, mixture_nll, total_loss
from .network import NetConfig, ParamStore, forward, backward, init_params, load_checkpoint, save_checkpoint
from .synthscene import Scene, SceneSpec, generate, make_dataset
from .trainer import TrainRun, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GateField", "LossConfig", "MixtureOutput", "NetConfig", "ParamStore", "Scene", "SceneSpec",
    "TrainRun", "backward", "forward", "gate_softmax", "gating_entropy", "generate", "init_params",
    "load_checkpoint", "make_dataset", "mixture_nll", "save_checkpoint", "total_loss", "train",
]
