"""Synthetic end-to-end benchmark helpers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import AnnotatedGraph, EvalReport, evaluate
from .raw import InferenceConfig, PointTracker, RawResult, raw_infer
from .synth import SynthConfig, SynthSequence, first_frame_queries, generate


@dataclass(frozen=True)
class SequenceScore:
    seed: int
    report: EvalReport
    daughters: int
    daughters_spawned: int


def spawned_daughters(seq: SynthSequence, result: RawResult, frame_tol: int = 1) -> int:
    """Ground-truth daughters recovered by a spawned row.

    A spawned row recovers a daughter when its first frame lies within
    ``frame_tol`` frames of the daughter's birth and its point there is within
    one cell radius of the daughter. Each row recovers at most one daughter.
    """
    rec = result.records
    radius = seq.config.cell_radius
    rows = []
    for r in np.flatnonzero(rec.row_parents >= 0):
        vis = np.flatnonzero(rec.V[r, :, 0] >= 0.5)
        if vis.size:
            rows.append((int(vis[0]), rec.L[r, vis[0], 0]))
    used: set[int] = set()
    hits = 0
    for tr in seq.truth_graph.tracks:
        if tr.parent == 0:
            continue
        for i, (t, p) in enumerate(rows):
            if i in used or abs(t - tr.begin) > frame_tol or t > tr.end:
                continue
            if np.hypot(*(p - seq.positions[tr.id][t - tr.begin])) <= radius:
                used.add(i)
                hits += 1
                break
    return hits


def score_sequence(seq: SynthSequence, result: RawResult) -> SequenceScore:
    graph, pos = result.decode()
    ref = AnnotatedGraph(seq.truth_graph, seq.positions, seq.config.cell_radius)
    report = evaluate(ref, AnnotatedGraph(graph, pos), match_radius=seq.config.cell_radius)
    n_d = sum(1 for tr in seq.truth_graph.tracks if tr.parent != 0)
    return SequenceScore(seq.config.seed, report, n_d, spawned_daughters(seq, result))


def run_benchmark(
    tracker: PointTracker,
    seeds,
    synth: SynthConfig = SynthConfig(),
    infer: InferenceConfig = InferenceConfig(l_win=16),
) -> list[SequenceScore]:
    out = []
    for seed in seeds:
        seq = generate(SynthConfig(**{**synth.to_dict(), "seed": int(seed)}))
        res = raw_infer(tracker, seq.frames, first_frame_queries(seq), infer)
        out.append(score_sequence(seq, res))
    return out
