"""Update operators: the interface, a zero operator and the training-free
correlation-argmax operator."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from ..features import FeatureConfig, corr_local_batch, offsets, to_map_coords, to_pixel_coords
from .tokens import TokenGrid

VISIBLE, HIDDEN = 0.98, 0.02


def gather_slot(L: np.ndarray, slot: np.ndarray) -> np.ndarray:
    """Per (cell, frame) point of the given slot: (N, T, 3, 2) -> (N, T, 2)."""
    N, T = slot.shape
    idx = np.broadcast_to(slot[:, :, None, None], (N, T, 1, 2))
    return np.take_along_axis(L, idx, axis=2)[:, :, 0]


@dataclass(frozen=True)
class WindowState:
    """Everything an operator may look at after the last update."""

    L: np.ndarray  # (N, T, 3, 2)
    F: np.ndarray  # (N, T, dim)
    V_in: np.ndarray  # (N, T, 3)
    levels: Sequence[np.ndarray]  # per level (T, dim, h, w)
    cfg: FeatureConfig
    corr_slot: np.ndarray  # (N, T) slot used for correlation lookups


@runtime_checkable
class UpdateOperator(Protocol):
    def apply(self, tokens: TokenGrid) -> tuple[np.ndarray, np.ndarray]:
        """Per-token increments: (N, T, 3, 2) locations and (N, T, dim) features."""
        ...

    def readout(self, state: WindowState) -> tuple[np.ndarray, np.ndarray]:
        """Final (locations, visibilities) of a window."""
        ...


class ZeroOperator:
    """Leaves every estimate unchanged; visibility from a linear head on F."""

    def __init__(self, vis_W: np.ndarray | None = None, vis_b: np.ndarray | None = None):
        self.vis_W = vis_W
        self.vis_b = vis_b

    def apply(self, tokens: TokenGrid):
        N, T = tokens.shape
        return np.zeros((N, T, 3, 2)), np.zeros_like(tokens.feat)

    def readout(self, state: WindowState):
        return state.L, visibility_head(state.F, self.vis_W, self.vis_b)


def visibility_head(F: np.ndarray, W: np.ndarray | None, b: np.ndarray | None) -> np.ndarray:
    """sigmoid(W F + b) per slot; ``W = None`` means all zeros."""
    N, T, dim = F.shape
    W = np.zeros((3, dim)) if W is None else W
    b = np.zeros(3) if b is None else b
    return sigmoid(F @ W.T + b)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _offset_order(delta: int) -> np.ndarray:
    """Flat indices of the (2d+1)^2 offsets sorted by (|offset|^2, dx, dy)."""
    dx, dy = offsets(delta)
    keys = np.lexsort((dy.ravel(), dx.ravel(), (dx**2 + dy**2).ravel()))
    return keys


def best_offsets(corr0: np.ndarray) -> np.ndarray:
    """Argmax offsets (dx, dy) of (..., 2d+1, 2d+1) correlation grids.

    Ties go to the smallest offset norm, then lexicographically smallest (dx, dy).
    """
    P = corr0.shape[-1]
    delta = (P - 1) // 2
    order = _offset_order(delta)
    flat = corr0.reshape(*corr0.shape[:-2], P * P)[..., order]
    pick = order[np.argmax(flat, axis=-1)]
    dy, dx = np.divmod(pick, P)
    return np.stack([dx - delta, dy - delta], axis=-1)


def deterministic_update(
    tokens: TokenGrid, corr: np.ndarray | None = None, k: int = 4, radius: int | None = None
):
    """Move every slot by the finest-scale correlation argmax (in pixels);
    features stay fixed.

    ``radius`` limits the search to offsets with Chebyshev norm at most
    ``radius`` (hill climbing); ``None`` searches the whole window.
    """
    corr = tokens.corr if corr is None else corr
    grid = corr[:, :, 0]
    if radius is not None:
        d = (grid.shape[-1] - 1) // 2
        dx, dy = offsets(d)
        grid = np.where(np.maximum(abs(dx), abs(dy)) <= radius, grid, -np.inf)
    step = best_offsets(grid).astype(float) * k
    N, T = tokens.shape
    dL = np.broadcast_to(step[:, :, None, :], (N, T, 3, 2)).copy()
    return dL, np.zeros_like(tokens.feat)


def _fit_axis(cm: np.ndarray, c0: np.ndarray, cp: np.ndarray) -> np.ndarray:
    """Sub-cell peak offset from three samples; Gaussian fit when all are
    positive, parabola otherwise; clipped to half a cell."""
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = (cm > 0) & (c0 > 0) & (cp > 0)
        lm, l0, lp = (np.log(np.where(pos, v, 1.0)) for v in (cm, c0, cp))
        g = np.where(pos, (lm - lp) / (2 * (lm - 2 * l0 + lp)), 0.0)
        q = (cm - cp) / (2 * (cm - 2 * c0 + cp))
        off = np.where(pos, g, q)
    off = np.where(np.isfinite(off), off, 0.0)
    return np.clip(off, -0.5, 0.5)


def refine_peaks(dots: np.ndarray, xy: np.ndarray, k: int) -> np.ndarray:
    """Sub-pixel peak positions of base-level dot maps near given points.

    ``dots`` is (N, T, h, w), ``xy`` (N, T, 2) pixels. The best grid node in
    the 3x3 neighbourhood of the nearest node is refined per axis by a
    three-point fit on the node values.
    """
    N, T, h, w = dots.shape
    uv = to_map_coords(xy, k, 0)
    cu = np.clip(np.rint(uv[..., 0]).astype(int), 0, w - 1)
    cv = np.clip(np.rint(uv[..., 1]).astype(int), 0, h - 1)
    n_idx, t_idx = np.meshgrid(np.arange(N), np.arange(T), indexing="ij")
    best = np.full((N, T), -np.inf)
    bu, bv = cu.copy(), cv.copy()
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            u = np.clip(cu + du, 0, w - 1)
            v = np.clip(cv + dv, 0, h - 1)
            val = dots[n_idx, t_idx, v, u]
            better = val > best
            best = np.where(better, val, best)
            bu = np.where(better, u, bu)
            bv = np.where(better, v, bv)
    c0 = dots[n_idx, t_idx, bv, bu]
    ou = _fit_axis(
        dots[n_idx, t_idx, bv, np.maximum(bu - 1, 0)], c0, dots[n_idx, t_idx, bv, np.minimum(bu + 1, w - 1)]
    )
    ov = _fit_axis(
        dots[n_idx, t_idx, np.maximum(bv - 1, 0), bu], c0, dots[n_idx, t_idx, np.minimum(bv + 1, h - 1), bu]
    )
    ou = np.where((bu == 0) | (bu == w - 1), 0.0, ou)
    ov = np.where((bv == 0) | (bv == h - 1), 0.0, ov)
    peak = np.stack([bu + ou, bv + ov], axis=-1)
    return to_pixel_coords(peak, k, 0)


def local_maxima(grid: np.ndarray) -> np.ndarray:
    """Boolean mask of 8-neighbourhood maxima (ties count) of (..., P, P)."""
    P = grid.shape[-1]
    pad = np.pad(grid, [(0, 0)] * (grid.ndim - 2) + [(1, 1), (1, 1)], constant_values=-np.inf)
    mask = np.ones(grid.shape, dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx or dy:
                mask &= grid >= pad[..., 1 + dy : 1 + dy + P, 1 + dx : 1 + dx + P]
    return mask


@dataclass
class DeterministicOperator:
    """Training-free operator: correlation-argmax moves plus a rule-based
    visibility readout.

    Each update climbs to the best offset within ``search_radius`` base cells
    (``None`` for the whole window), which keeps a point on its own cell when
    an equally bright one sits inside the window.

    The readout refines slot-0 points to sub-pixel peaks, then scans each row
    in time. A *division* starts at the first frame ``t >= 1`` with a second
    local correlation maximum that is at least ``split_ratio`` times the
    primary, at least two base cells away from it, not within
    ``exclusion_px`` of another row's point, and present again at ``t + 1``
    (when that frame exists). A *death* starts when the primary response
    drops below ``death_ratio`` times the template's self-response on two
    consecutive frames. Both are irreversible. After a division, slot 1
    follows the primary peak and slot 2 the secondary one.
    """

    k: int = 4
    split_ratio: float = 0.5
    death_ratio: float = 0.4
    exclusion_px: float = 6.0
    subpixel: bool = True
    search_radius: int | None = 1

    def apply(self, tokens: TokenGrid):
        return deterministic_update(tokens, k=self.k, radius=self.search_radius)

    def readout(self, state: WindowState):
        cfg = replace(state.cfg, S=1)
        N, T = state.L.shape[:2]
        centres = gather_slot(state.L, state.corr_slot)
        corr, cache = corr_local_batch(state.F, state.levels[:1], centres, cfg, keep=True)
        grid = corr[:, :, 0]
        P, d = cfg.window, cfg.delta
        local = grid
        if self.search_radius is not None:
            dxg, dyg = offsets(d)
            near = np.maximum(abs(dxg), abs(dyg)) <= self.search_radius
            local = np.where(near, grid, -np.inf)
        primary_off = best_offsets(local)
        flat = grid.reshape(N, T, P * P)
        pi = (primary_off[..., 1] + d) * P + (primary_off[..., 0] + d)
        primary = np.take_along_axis(flat, pi[..., None], -1)[..., 0]
        self_resp = np.einsum("nc,nc->n", state.F[:, 0], state.F[:, 0])

        main = centres + primary_off * self.k
        if self.subpixel:
            main = refine_peaks(cache.dots[0], main, self.k)

        dx, dy = offsets(d)
        cheb = np.maximum(np.abs(dx - primary_off[..., 0, None, None]), np.abs(dy - primary_off[..., 1, None, None]))
        cand = local_maxima(grid) & (cheb >= 2) & (grid >= self.split_ratio * primary[..., None, None])
        cand &= primary[..., None, None] > 0
        # offsets whose lookup was clamped at the border only repeat edge values
        cand &= cache.samplers[0].inside_x & cache.samplers[0].inside_y
        cand_xy = centres[:, :, None, None, :] + np.stack([dx, dy], -1) * self.k  # (N,T,P,P,2)
        # suppress candidates sitting on another row's point
        for n in range(N):
            others = np.delete(main, n, axis=0)  # (N-1, T, 2)
            if others.size == 0:
                continue
            dist = np.linalg.norm(cand_xy[n][None] - others[:, :, None, None, :], axis=-1)
            cand[n] &= ~(dist < self.exclusion_px).any(axis=0)
        score = np.where(cand, grid, -np.inf).reshape(N, T, P * P)
        has_second = np.isfinite(score.max(-1))
        si = np.argmax(score, -1)
        sdy, sdx = np.divmod(si, P)
        second = centres + (np.stack([sdx, sdy], -1) - d) * self.k
        if self.subpixel:
            second = refine_peaks(cache.dots[0], second, self.k)

        weak = primary < self.death_ratio * self_resp[:, None]
        L = state.L.copy()
        V = np.tile(np.array([VISIBLE, HIDDEN, HIDDEN]), (N, T, 1))
        for n in range(N):
            L[n, :, 0] = main[n]
            event = None
            for t in range(1, T):
                nxt_split = t + 1 >= T or has_second[n, t + 1]
                nxt_weak = t + 1 >= T or weak[n, t + 1]
                if has_second[n, t] and nxt_split:
                    event = ("split", t)
                    break
                if weak[n, t] and nxt_weak:
                    event = ("death", t)
                    break
            if event is None:
                continue
            kind, t0 = event
            if kind == "death":
                V[n, t0:] = HIDDEN
                continue
            V[n, t0:] = (HIDDEN, VISIBLE, VISIBLE)
            L[n, t0:, 1] = main[n, t0:]
            L[n, t0:, 2] = np.where(has_second[n, t0:, None], second[n, t0:], main[n, t0:])
        for slot in (1, 2):
            L[:, :, slot] = np.where(V[:, :, slot, None] > 0.5, L[:, :, slot], L[:, :, 0])
        return L, V
