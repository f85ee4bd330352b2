"""Training of the learned operator by back-propagation through iterations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..features import FeatureConfig, corr_local_batch_backward
from ..lineage import D1, D2, LineageGraph, window_records
from ..sampling import SamplerConfig, WindowSampler, anchors_from_graph, sliding_windows
from .engine import NumericError, initial_state, iterate
from .learned import LearnedOperator
from .losses import loss_tra_grad, loss_vis_grad_logits
from .tokens import loc_grad_to_L

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int):
        super().__init__(f"loss became non-finite in epoch {epoch} (step {step})")
        self.epoch = epoch
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    M: int = 4
    gamma: float = 0.8
    lr: float = 5e-4
    weight_decay: float = 1e-5
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    warmup: float = 0.05
    epochs: int = 10
    batch_size: int = 4
    grad_clip: float | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ValueError("rates must be non-negative and eps positive")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class TrainingWindow:
    """One supervised window: stacked pyramid levels for its frames, the
    query points at its first frame and window-layout targets."""

    levels: list[np.ndarray]
    xy: np.ndarray
    gt_L: np.ndarray
    gt_V: np.ndarray
    templates: np.ndarray | None = None


def canonical_daughters(L: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Order interchangeable daughters left to right.

    When both daughter slots are visible on exactly the same frames the
    longer-lived rule cannot tell them apart, so the one with the smaller x
    (then y) at its first visible frame goes to slot 1.
    """
    L, V = L.copy(), V.copy()
    for n in range(L.shape[0]):
        a, b = V[n, :, D1] >= 0.5, V[n, :, D2] >= 0.5
        if not a.any() or not np.array_equal(a, b):
            continue
        t = int(np.argmax(a))
        if tuple(L[n, t, D2]) < tuple(L[n, t, D1]):
            L[n, :, D1], L[n, :, D2] = L[n, :, D2].copy(), L[n, :, D1].copy()
    return L, V


def windows_from_sequence(
    levels: Sequence[np.ndarray],
    graph: LineageGraph,
    positions: Mapping[int, np.ndarray],
    sampler: SamplerConfig,
    crops: int,
    window: int,
    l_slide: int,
    division_duration: int = 2,
) -> list[TrainingWindow]:
    """Event-balanced crops of ``sampler.T_s`` frames, each cut into
    semi-overlapping windows of ``window`` frames.

    ``levels`` are the sequence's stacked pyramid levels (T, C, h, w).
    """
    T = graph.frame_count
    draw = WindowSampler(T, sampler, anchors_from_graph(graph, division_duration))
    starts = []
    for _ in range(crops):
        start = draw()
        starts += [start + off for off in sliding_windows(sampler.T_s, window, l_slide)]
    out = []
    for t0 in starts:
        rec = window_records(graph, positions, t0, window)
        if rec.n_rows == 0:
            continue
        L, V = canonical_daughters(rec.L, rec.V)
        out.append(TrainingWindow([lv[t0 : t0 + window] for lv in levels], L[:, 0, 0].copy(), L, V))
    return out


@dataclass
class WindowGrad:
    l_tra: float
    l_vis: float
    grads: dict[str, np.ndarray]


def window_gradient(op: LearnedOperator, win: TrainingWindow, cfg: TrainConfig) -> WindowGrad:
    """Losses of one window and their gradients w.r.t. every parameter."""
    fcfg: FeatureConfig = op.features
    L0, V_in, F0 = initial_state(win.levels, win.xy, fcfg, win.templates)
    res = iterate(op, win.levels, L0, V_in, F0, cfg.M, fcfg, op.shape.time_dim, record=True)
    l_tra, gL_iter = loss_tra_grad(res.history_L, win.gt_L, win.gt_V, cfg.gamma)
    F_last = res.history_F[-1]
    l_vis, gz = loss_vis_grad_logits(op.visibility_logits(F_last), win.gt_V)

    grads = {k: np.zeros_like(v) for k, v in op.params.items()}
    grads["vis.W"] += np.einsum("nti,ntd->id", gz, F_last)
    grads["vis.b"] += gz.sum(axis=(0, 1))
    gL = gL_iter[-1]
    gF = gz @ op.params["vis.W"]
    N, T = gL.shape[:2]
    nn, tt = np.meshgrid(np.arange(N), np.arange(T), indexing="ij")
    for m in reversed(range(cfg.M)):
        entry = res.tape[m]
        dtok, pg = op.backward(gL, gF, entry.op_cache)
        for k, v in pg.items():
            grads[k] += v
        dloc, dfeat, dcorr = entry.tokens.split(dtok)
        dF_corr, dcent, _ = corr_local_batch_backward(dcorr, win.levels, entry.corr_cache, fcfg)
        gL = gL + loc_grad_to_L(dloc)
        np.add.at(gL, (nn, tt, res.corr_slot), dcent)
        gF = gF + dfeat + dF_corr
        if m > 0:
            gL = gL + gL_iter[m - 1]
    return WindowGrad(l_tra, l_vis, grads)


def learning_rate(step: int, total: int, peak: float, warmup: float) -> float:
    """Linear warm-up over the first ``warmup`` fraction of steps, then
    linear decay to zero at ``total``."""
    warm = max(1, int(round(warmup * total)))
    if step < warm:
        return peak * (step + 1) / warm
    return peak * max(0.0, (total - step) / max(1, total - warm))


@dataclass
class AdamW:
    params: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1 - self.beta2) * g * g
            p -= lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    curve: list[tuple[int, float, float]]  # (epoch, mean L_tra, mean L_vis) per window
    step_losses: list[float]


def train(
    op: LearnedOperator,
    windows: Sequence[TrainingWindow],
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Fit ``op.params`` in place on ``windows``.

    Each step averages the summed per-window losses over its batch. Raises
    :class:`TrainingDiverged` when a loss or gradient becomes non-finite.
    """
    if not windows:
        raise ValueError("no training windows")
    rng = np.random.default_rng(seed)
    per_epoch = -(-len(windows) // cfg.batch_size)
    total = cfg.epochs * per_epoch
    opt = AdamW(op.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    curve, steps = [], []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(windows))
        sum_tra = sum_vis = 0.0
        for b in range(per_epoch):
            batch = [windows[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            try:
                parts = [window_gradient(op, w, cfg) for w in batch]
            except NumericError:
                raise TrainingDiverged(epoch, step) from None
            l_tra = sum(p.l_tra for p in parts)
            l_vis = sum(p.l_vis for p in parts)
            grads = {k: sum(p.grads[k] for p in parts) / len(parts) for k in op.params}
            if not np.isfinite(l_tra + l_vis) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(epoch, step)
            if cfg.grad_clip is not None:
                norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
                if norm > cfg.grad_clip:
                    grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
            opt.step(grads, learning_rate(step, total, cfg.lr, cfg.warmup))
            steps.append((l_tra + l_vis) / len(parts))
            sum_tra += l_tra
            sum_vis += l_vis
            step += 1
        curve.append((epoch, sum_tra / len(windows), sum_vis / len(windows)))
        log.info("epoch %d: L_tra %.4f L_vis %.4f", *curve[-1])
        if on_epoch is not None:
            on_epoch(*curve[-1])
    return TrainResult(op.params, curve, steps)
