"""Joint iterative refinement of all trajectories in a window."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..features import CorrCache, FeatureConfig, corr_local_batch, sample_features
from .operators import UpdateOperator, WindowState, gather_slot
from .tokens import TIME_DIM, TokenGrid, assemble_tokens


class NumericError(FloatingPointError):
    def __init__(self, message: str, iteration: int | None = None, roll: int | None = None):
        super().__init__(message)
        self.iteration = iteration
        self.roll = roll


@dataclass
class TapeEntry:
    tokens: TokenGrid
    corr_cache: CorrCache
    op_cache: Any


@dataclass
class IterateResult:
    history_L: list[np.ndarray]  # M post-update estimates, each (N, T, 3, 2)
    history_F: list[np.ndarray]  # each (N, T, dim)
    L: np.ndarray  # final read-out locations
    V: np.ndarray  # final visibilities (N, T, 3)
    corr_slot: np.ndarray
    tape: list[TapeEntry] = field(default_factory=list)


def corr_slots(V_in: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Slot used for correlation: the cell itself, or the first daughter
    once the input visibility says the cell has divided."""
    divided = (V_in[..., 0] < threshold) & (V_in[..., 1] >= threshold)
    return np.where(divided, 1, 0)


def initial_state(
    levels: Sequence[np.ndarray], xy: np.ndarray, cfg: FeatureConfig, templates: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(L0, V_in, F_init) for queries ``xy`` (N, 2) at the window's first frame.

    Locations are broadcast over frames and slots, visibility starts at
    (1, 0, 0) and features are sampled from the first frame's base map unless
    ``templates`` are given.
    """
    T = levels[0].shape[0]
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    N = xy.shape[0]
    L0 = np.broadcast_to(xy[:, None, None, :], (N, T, 3, 2)).copy()
    V_in = np.zeros((N, T, 3))
    V_in[..., 0] = 1.0
    F = sample_features(levels[0][0], xy, cfg.k) if templates is None else np.asarray(templates, float)
    return L0, V_in, F


def iterate(
    op: UpdateOperator,
    levels: Sequence[np.ndarray],
    L0: np.ndarray,
    V_in: np.ndarray,
    F_init: np.ndarray,
    M: int,
    cfg: FeatureConfig,
    time_dim: int = TIME_DIM,
    record: bool = False,
) -> IterateResult:
    """Apply ``M`` additive updates ``L += dL, F += dF`` with correlations
    recomputed at the current points before each one.

    ``F_init`` is (N, dim) and is broadcast to every frame. With ``record``
    the operator must provide ``forward(tokens) -> ((dL, dF), cache)`` and the
    per-iteration caches are kept for back-propagation.
    """
    if M < 1:
        raise ValueError("M must be at least 1")
    L = np.array(L0, dtype=float)
    N, T = L.shape[:2]
    F = np.broadcast_to(np.asarray(F_init, float)[:, None, :], (N, T, cfg.dim)).copy()
    slot = corr_slots(V_in)
    hist_L, hist_F, tape = [], [], []
    for m in range(M):
        corr, cc = corr_local_batch(F, levels, gather_slot(L, slot), cfg, keep=record)
        tokens = assemble_tokens(L, V_in, F, corr, cfg, time_dim)
        if record:
            (dL, dF), oc = op.forward(tokens)
            tape.append(TapeEntry(tokens, cc, oc))
        else:
            dL, dF = op.apply(tokens)
        if not (np.all(np.isfinite(dL)) and np.all(np.isfinite(dF))):
            raise NumericError(f"non-finite update at iteration {m + 1}", iteration=m + 1)
        L = L + dL
        F = F + dF
        hist_L.append(L)
        hist_F.append(F)
    L_out, V = op.readout(WindowState(L, F, V_in, levels, cfg, slot))
    if not (np.all(np.isfinite(L_out)) and np.all(np.isfinite(V))):
        raise NumericError("non-finite read-out", iteration=M)
    return IterateResult(hist_L, hist_F, L_out, V, slot, tape)
