"""Seeded synthetic fluorescence-like sequences with exact lineage truth."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Mapping

import numpy as np

from .lineage import LineageGraph, PointRecords, TrackRecord, points_from_graph
from .queries import QuerySet
from .sampling import DivisionAnchor, anchors_from_graph


class PlacementError(RuntimeError):
    pass


class ConfigError(ValueError):
    """Invalid configuration value; the message names the field."""


@dataclass(frozen=True)
class SynthConfig:
    H: int = 128
    W: int = 128
    T: int = 48
    n_initial: int = 8
    motion_sigma: float = 0.5
    drift: tuple[float, float] = (0.0, 0.0)
    division_rate: float = 0.01
    apoptosis_rate: float = 0.0
    blob_sigma: float = 3.0
    intensity: tuple[float, float] = (0.6, 1.0)
    noise_sigma: float = 0.05
    min_separation: float = 20.0
    division_duration: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "drift", tuple(float(v) for v in self.drift))
        object.__setattr__(self, "intensity", tuple(float(v) for v in self.intensity))
        for name in ("H", "W", "T", "n_initial"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("division_rate", "apoptosis_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.division_rate + self.apoptosis_rate > 1.0:
            raise ConfigError("division_rate + apoptosis_rate exceeds 1")
        for name in ("motion_sigma", "noise_sigma", "min_separation"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.blob_sigma <= 0:
            raise ConfigError("blob_sigma must be positive")
        if len(self.drift) != 2:
            raise ConfigError("drift must have two components")
        lo, hi = self.intensity if len(self.intensity) == 2 else (None, None)
        if lo is None or not 0 < lo <= hi:
            raise ConfigError("intensity must be a (low, high) pair with 0 < low <= high")
        if self.division_duration < 2:
            raise ConfigError("division_duration must be at least 2")

    @property
    def cell_radius(self) -> float:
        return 2.0 * self.blob_sigma

    @property
    def division_offset(self) -> float:
        return 2.0 * self.blob_sigma

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**dict(data))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["drift"] = list(self.drift)
        d["intensity"] = list(self.intensity)
        return d


@dataclass(frozen=True)
class SynthSequence:
    config: SynthConfig
    frames: np.ndarray  # (T, H, W) in [0, 1]
    truth_graph: LineageGraph
    positions: dict[int, np.ndarray]
    records: PointRecords
    anchors: list[DivisionAnchor] = field(default_factory=list)

    @property
    def truth_L(self) -> np.ndarray:
        return self.records.L

    @property
    def truth_V(self) -> np.ndarray:
        return self.records.V


@dataclass
class _Cell:
    id: int
    begin: int
    parent: int
    amp: float
    path: list[np.ndarray]


def _reflect(v: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Fold coordinates back into [0, hi] (mirror boundaries)."""
    out = np.zeros_like(v)
    for i in range(len(v)):
        if hi[i] > 0:
            r = math.fmod(v[i], 2.0 * hi[i]) % (2.0 * hi[i])
            out[i] = 2.0 * hi[i] - r if r > hi[i] else r
    return out


def _place(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    pts: list[np.ndarray] = []
    attempts = 0
    hi = np.array([cfg.W - 1, cfg.H - 1], dtype=float)
    while len(pts) < cfg.n_initial:
        if attempts >= 1000:
            raise PlacementError(
                f"placed {len(pts)} of {cfg.n_initial} cells with separation "
                f"{cfg.min_separation} after 1000 attempts"
            )
        attempts += 1
        p = rng.uniform(0.0, 1.0, 2) * hi
        if all(np.hypot(*(p - q)) >= cfg.min_separation for q in pts):
            pts.append(p)
    return np.array(pts)


def render(
    centers: np.ndarray, amps: np.ndarray, shape: tuple[int, int], sigma: float
) -> np.ndarray:
    """Noise-free sum of isotropic Gaussian spots sampled at pixel centres."""
    H, W = shape
    img = np.zeros((H, W))
    ys = np.arange(H, dtype=float)
    xs = np.arange(W, dtype=float)
    for (cx, cy), a in zip(np.reshape(centers, (-1, 2)), amps):
        gx = np.exp(-((xs - cx) ** 2) / (2 * sigma**2))
        gy = np.exp(-((ys - cy) ** 2) / (2 * sigma**2))
        img += a * np.outer(gy, gx)
    return img


def generate(cfg: SynthConfig) -> SynthSequence:
    """Simulate, render and package one sequence; bitwise deterministic in
    ``cfg`` (including ``cfg.seed``)."""
    rng = np.random.default_rng(cfg.seed)
    hi = np.array([cfg.W - 1, cfg.H - 1], dtype=float)
    drift = np.asarray(cfg.drift, dtype=float)
    start = _place(rng, cfg)
    lo_i, hi_i = cfg.intensity
    alive: list[_Cell] = []
    for i, p in enumerate(start):
        alive.append(_Cell(i + 1, 0, 0, float(rng.uniform(lo_i, hi_i)), [p]))
    done: list[_Cell] = []
    next_id = len(alive) + 1
    for t in range(1, cfg.T):
        nxt: list[_Cell] = []
        for c in alive:
            u = rng.random()
            step = drift + rng.normal(0.0, cfg.motion_sigma, 2)
            if u < cfg.division_rate:
                theta = rng.uniform(0.0, math.pi)
                axis = np.array([math.cos(theta), math.sin(theta)])
                centre = c.path[-1] + step
                for sign in (1.0, -1.0):
                    pos = _reflect(centre + sign * cfg.division_offset * axis, hi)
                    nxt.append(_Cell(next_id, t, c.id, c.amp, [pos]))
                    next_id += 1
                done.append(c)
            elif u < cfg.division_rate + cfg.apoptosis_rate:
                done.append(c)
            else:
                c.path.append(_reflect(c.path[-1] + step, hi))
                nxt.append(c)
        alive = nxt
    done.extend(alive)
    done.sort(key=lambda c: c.id)

    tracks = []
    positions: dict[int, np.ndarray] = {}
    for c in done:
        tracks.append(TrackRecord(c.id, c.begin, c.begin + len(c.path) - 1, c.parent))
        positions[c.id] = np.array(c.path)
    graph = LineageGraph(tuple(tracks), cfg.T)

    frames = np.empty((cfg.T, cfg.H, cfg.W))
    for t in range(cfg.T):
        live = [c for c in done if c.begin <= t < c.begin + len(c.path)]
        centers = np.array([c.path[t - c.begin] for c in live]).reshape(-1, 2)
        img = render(centers, np.array([c.amp for c in live]), (cfg.H, cfg.W), cfg.blob_sigma)
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
        frames[t] = np.clip(img, 0.0, 1.0)

    return SynthSequence(
        config=cfg,
        frames=frames,
        truth_graph=graph,
        positions=positions,
        records=points_from_graph(graph, positions),
        anchors=anchors_from_graph(graph, cfg.division_duration),
    )


def first_frame_queries(seq: SynthSequence) -> QuerySet:
    """Ground-truth frame-0 points of every cell alive at frame 0."""
    tracks = seq.truth_graph.alive_at(0)
    ids = np.array([tr.id for tr in tracks], dtype=np.int64)
    xy = np.array([seq.positions[tr.id][0] for tr in tracks]).reshape(-1, 2)
    return QuerySet(ids, xy)
