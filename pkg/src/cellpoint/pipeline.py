"""Glue between sequences, encoders, operators and training jobs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Mapping, Sequence

import numpy as np

from .features import FeatureConfig, FixedEncoder
from .lineage import LineageGraph
from .raw import PointTracker
from .sampling import SamplerConfig
from .tracker.learned import LearnedOperator, OperatorShape
from .tracker.operators import DeterministicOperator
from .tracker.training import TrainConfig, TrainingWindow, TrainResult, train, windows_from_sequence


class JobError(ValueError):
    pass


@dataclass(frozen=True)
class TrainJob:
    """Everything needed to reproduce a training run; flat JSON keys."""

    # data
    T_s: int = 24
    l_slide: int = 4
    l_window: int = 8
    crops: int = 4
    division_duration: int = 2
    # operator
    dim: int = 32
    k: int = 4
    S: int = 4
    delta: int = 3
    width: int = 64
    hidden: int = 128
    n_blocks: int = 2
    # optimisation
    M: int = 4
    gamma: float = 0.8
    lr: float = 5e-4
    weight_decay: float = 1e-5
    eps: float = 1e-8
    warmup: float = 0.05
    epochs: int = 10
    batch_size: int = 4
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.l_window <= self.T_s:
            raise JobError("l_window must lie in (0, T_s]")
        if not 0 < self.l_slide <= self.l_window:
            raise JobError("l_slide must lie in (0, l_window]")
        if self.crops < 1:
            raise JobError("crops must be positive")
        try:
            self.train_config
            self.shape.features
        except ValueError as exc:
            raise JobError(str(exc)) from None

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "TrainJob":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise JobError(f"unknown config keys: {unknown}")
        try:
            return cls(**dict(data))
        except TypeError as exc:
            raise JobError(str(exc)) from None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @property
    def shape(self) -> OperatorShape:
        return OperatorShape(dim=self.dim, S=self.S, delta=self.delta, k=self.k, width=self.width,
                             hidden=self.hidden, n_blocks=self.n_blocks)

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(M=self.M, gamma=self.gamma, lr=self.lr, weight_decay=self.weight_decay, eps=self.eps,
                           warmup=self.warmup, epochs=self.epochs, batch_size=self.batch_size,
                           grad_clip=self.grad_clip)


def deterministic_tracker(dim: int = 128, k: int = 4, S: int = 4, delta: int = 3) -> PointTracker:
    return PointTracker(DeterministicOperator(k=k), FixedEncoder(dim, k), FeatureConfig(k=k, dim=dim, S=S, delta=delta))


def learned_tracker(op: LearnedOperator) -> PointTracker:
    """Learned operators run on the fixed encoder of their feature width."""
    f = op.features
    return PointTracker(op, FixedEncoder(f.dim, f.k), f)


@dataclass(frozen=True)
class AnnotatedSequence:
    frames: np.ndarray
    graph: LineageGraph
    positions: Mapping[int, np.ndarray]


def training_windows(sources: Sequence[AnnotatedSequence], job: TrainJob) -> list[TrainingWindow]:
    """AEG-sampled windows from every source, seeded per source index."""
    f = job.shape.features
    encoder = FixedEncoder(f.dim, f.k)
    out: list[TrainingWindow] = []
    for i, src in enumerate(sources):
        tracker = PointTracker(None, encoder, f)
        T = src.frames.shape[0]
        crop = min(job.T_s, T)
        window = min(job.l_window, crop)
        levels = tracker.levels(src.frames, 0, T)
        sampler = SamplerConfig(T_s=crop, l_slide=min(job.l_slide, window), rng_seed=job.seed * 100003 + i)
        out += windows_from_sequence(levels, src.graph, src.positions, sampler, job.crops, window,
                                     min(job.l_slide, window), job.division_duration)
    return out


def fit(sources: Sequence[AnnotatedSequence], job: TrainJob, on_epoch=None) -> tuple[LearnedOperator, TrainResult]:
    windows = training_windows(sources, job)
    if not windows:
        raise JobError("no training windows could be drawn")
    op = LearnedOperator(job.shape, seed=job.seed)
    return op, train(op, windows, job.train_config, seed=job.seed, on_epoch=on_epoch)
