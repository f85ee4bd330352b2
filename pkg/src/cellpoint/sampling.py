"""Event-guided training-window selection and sliding sub-windows."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .lineage import LineageGraph, division_events


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    T_s: int = 24
    l_slide: int = 8
    rng_seed: int = 0

    def check(self, T: int) -> None:
        if not 0 < self.T_s <= T:
            raise DomainError(f"T_s={self.T_s} must lie in (0, {T}]")
        if not 0 < self.l_slide <= self.T_s:
            raise DomainError(f"l_slide={self.l_slide} must lie in (0, T_s]")


@dataclass(frozen=True)
class DivisionAnchor:
    """Frames ``[t_start, t_end]`` spanning one complete division: from the
    mother's dividing phase through the daughters' first frame."""

    t_start: int
    t_end: int

    def __post_init__(self):
        if self.t_start > self.t_end:
            raise DomainError(f"anchor start {self.t_start} after end {self.t_end}")

    @property
    def duration(self) -> int:
        return self.t_end - self.t_start + 1


def anchors_from_graph(g: LineageGraph, division_duration: int = 2) -> list[DivisionAnchor]:
    """One anchor per division event.

    The event ends on the daughters' first frame and starts
    ``division_duration - 1`` frames earlier, never before the mother's birth.
    """
    if division_duration < 2:
        raise DomainError("a division spans at least the mother's last and the daughters' first frame")
    table = g.by_id()
    out = []
    for mother_id, t_div in division_events(g):
        birth = min(c.begin for c in g.children(mother_id))
        start = max(table[mother_id].begin, birth - division_duration + 1)
        out.append(DivisionAnchor(start, birth))
    return out


def aeg_probability(n_div: int, t_div: float, T: int) -> float:
    """min(1, N_div * T_div / T)."""
    if T <= 0:
        raise DomainError("sequence length must be positive")
    if n_div < 0 or t_div < 0:
        raise DomainError("division count and duration must be non-negative")
    return min(1.0, n_div * t_div / T)


def aeg_probability_for(anchors: Sequence[DivisionAnchor], T: int) -> float:
    """P_AEG for a sequence, with T_div taken as the mean anchor duration."""
    if not anchors:
        return aeg_probability(0, 0, T)
    return aeg_probability(len(anchors), float(np.mean([a.duration for a in anchors])), T)


class WindowDraw(NamedTuple):
    start: int
    event_guided: bool


def feasible_starts(anchor: DivisionAnchor, T: int, T_s: int) -> range:
    """Starts ``s`` whose window ``[s, s + T_s)`` contains the whole anchor."""
    lo = max(0, anchor.t_end - T_s + 1)
    hi = min(anchor.t_start, T - T_s)
    return range(lo, hi + 1)


def draw_window(
    rng: np.random.Generator,
    T: int,
    T_s: int,
    anchors: Sequence[DivisionAnchor],
    p_aeg: float,
) -> WindowDraw:
    if not 0 < T_s <= T:
        raise DomainError(f"T_s={T_s} must lie in (0, {T}]")
    p = rng.random()
    if p < p_aeg and anchors:
        anchor = anchors[rng.integers(len(anchors))]
        starts = feasible_starts(anchor, T, T_s)
        if len(starts) == 0:
            return WindowDraw(int(np.clip(anchor.t_start, 0, T - T_s)), True)
        return WindowDraw(int(starts[rng.integers(len(starts))]), True)
    return WindowDraw(int(rng.integers(T - T_s + 1)), False)


def sample_window_start(
    rng: np.random.Generator,
    T: int,
    T_s: int,
    anchors: Sequence[DivisionAnchor],
    p_aeg: float,
) -> int:
    """First frame of a ``T_s``-frame training window.

    With probability ``p_aeg`` (and at least one anchor) an anchor is chosen
    uniformly and the start is drawn uniformly among the windows containing
    it entirely; events longer than the window fall back to the clamped event
    start. Otherwise the start is uniform over ``[0, T - T_s]``.
    """
    return draw_window(rng, T, T_s, anchors, p_aeg).start


def sliding_windows(T_seq: int, T_s: int, l_slide: int) -> list[int]:
    """Window starts 0, l_slide, 2*l_slide, ... plus a tail window ending on
    the last frame when the stride does not land there."""
    if T_s > T_seq:
        raise DomainError(f"window {T_s} longer than sequence {T_seq}")
    if l_slide <= 0:
        raise DomainError("l_slide must be positive")
    starts = list(range(0, T_seq - T_s + 1, l_slide))
    if starts[-1] + T_s < T_seq:
        starts.append(T_seq - T_s)
    return starts


class WindowSampler:
    """Seeded AEG sampler bound to one sequence's division anchors."""

    def __init__(self, T: int, cfg: SamplerConfig, anchors: Sequence[DivisionAnchor]):
        cfg.check(T)
        self.T = T
        self.cfg = cfg
        self.anchors = list(anchors)
        self.p_aeg = aeg_probability_for(self.anchors, T)
        self.rng = np.random.default_rng(cfg.rng_seed)

    def draw(self) -> WindowDraw:
        return draw_window(self.rng, self.T, self.cfg.T_s, self.anchors, self.p_aeg)

    def __call__(self) -> int:
        return self.draw().start
