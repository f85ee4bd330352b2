"""Trajectory and visibility losses with their gradients.

Both are plain sums over windows, iterations, cells, frames and slots.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

EPS = 1e-7


def _tra_terms(L_m: np.ndarray, gt_L: np.ndarray, gt_vis: np.ndarray):
    diff = np.asarray(L_m, float) - gt_L
    norm = np.sqrt((diff**2).sum(-1))
    return diff, norm * gt_vis, norm


def loss_tra(
    histories: Sequence[Sequence[np.ndarray]],
    gt_L: Sequence[np.ndarray],
    gt_V: Sequence[np.ndarray],
    gamma: float = 0.8,
) -> float:
    """Discounted location error over J windows.

    ``histories[j][m]`` is the (N, T, 3, 2) estimate after iteration m+1;
    iteration m (1-based) of M is weighted by ``gamma ** (M - m)``. Only
    slots with ``gt_V >= 0.5`` contribute.
    """
    total = 0.0
    for hist, L, V in zip(histories, gt_L, gt_V, strict=True):
        vis = np.asarray(V) >= 0.5
        M = len(hist)
        for m, Lm in enumerate(hist, start=1):
            total += gamma ** (M - m) * float(_tra_terms(Lm, L, vis)[1].sum())
    return total


def loss_tra_grad(history: Sequence[np.ndarray], gt_L: np.ndarray, gt_V: np.ndarray, gamma: float = 0.8):
    """Loss and per-iteration gradients for a single window.

    The norm's gradient is taken as zero where the error is exactly zero.
    """
    vis = np.asarray(gt_V) >= 0.5
    M = len(history)
    loss, grads = 0.0, []
    for m, Lm in enumerate(history, start=1):
        w = gamma ** (M - m)
        diff, terms, norm = _tra_terms(Lm, gt_L, vis)
        loss += w * float(terms.sum())
        safe = np.where(norm > 0, norm, 1.0)
        grads.append(w * np.where((vis & (norm > 0))[..., None], diff / safe[..., None], 0.0))
    return loss, grads


def loss_vis(V_hat: Sequence[np.ndarray], gt_V: Sequence[np.ndarray]) -> float:
    """Binary cross-entropy summed over everything, predictions clamped to
    [EPS, 1 - EPS]."""
    total = 0.0
    for p, y in zip(V_hat, gt_V, strict=True):
        p = np.clip(np.asarray(p, float), EPS, 1 - EPS)
        y = np.asarray(y, float)
        total += float(-(y * np.log(p) + (1 - y) * np.log1p(-p)).sum())
    return total


def loss_vis_grad_logits(logits: np.ndarray, gt_V: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss of ``sigmoid(logits)`` and its gradient w.r.t. the logits.

    Where the clamp is active the gradient is zero, matching the clamped
    forward value exactly.
    """
    z = np.asarray(logits, float)
    p = 1.0 / (1.0 + np.exp(-z))
    y = np.asarray(gt_V, float)
    loss = loss_vis([p], [y])
    live = (p > EPS) & (p < 1 - EPS)
    return loss, np.where(live, p - y, 0.0)
