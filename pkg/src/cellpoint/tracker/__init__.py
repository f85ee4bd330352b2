"""Joint iterative refinement of cell trajectories and its operators."""

from .checkpoint import load_operator, save_operator
from .engine import IterateResult, NumericError, initial_state, iterate
from .learned import LearnedOperator, OperatorShape
from .losses import loss_tra, loss_vis
from .operators import DeterministicOperator, ZeroOperator, deterministic_update
from .tokens import TokenGrid, assemble_tokens
from .training import TrainConfig, TrainingDiverged, TrainingWindow, train

__all__ = [
    "DeterministicOperator",
    "IterateResult",
    "LearnedOperator",
    "NumericError",
    "OperatorShape",
    "TokenGrid",
    "TrainConfig",
    "TrainingDiverged",
    "TrainingWindow",
    "ZeroOperator",
    "assemble_tokens",
    "deterministic_update",
    "initial_state",
    "iterate",
    "load_operator",
    "loss_tra",
    "loss_vis",
    "save_operator",
    "train",
]
