"""AOGM / TRA evaluation of point-based cell tracking results.

Vertices are (track id, frame) pairs located at the track's point. A
predicted vertex is matched to a reference vertex in the same frame when the
two points lie within ``min(match_radius, reference radius)`` of each other;
per frame the matching maximises the number of matched pairs, then minimises
the total distance (Hungarian assignment).

Edges come in two kinds: ``"track"`` links a track's consecutive frames and
``"parent"`` links a mother's last vertex to a daughter's first vertex.

Operation counts, given the matching:

* ``FP``  -- unmatched predicted vertices;
* ``FN``  -- unmatched reference vertices;
* ``ES``  -- matched predicted vertices that also lie within reach of another,
  unmatched reference vertex (a point cannot be split, so this counts the
  points covering more than one cell; the name follows the published table);
* ``ED``  -- predicted edges between matched vertices whose images are not a
  reference edge;
* ``EA``  -- reference edges without a predicted edge between their matched
  preimages;
* ``ESM`` -- corresponding edges whose kinds differ.

Edges touching unmatched predicted vertices vanish with those vertices and are
not counted.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .lineage import NO_PARENT, LineageGraph

Vertex = tuple[int, int]  # (track id, frame)
TRACK_EDGE = "track"
PARENT_EDGE = "parent"


class FormatError(ValueError):
    pass


class UndefinedMetric(ValueError):
    pass


@dataclass(frozen=True)
class MetricWeights:
    w_ES: float = 5.0
    w_EA: float = 1.5
    w_ED: float = 1.0
    w_ESM: float = 1.0
    w_FP: float = 1.0
    w_FN: float = 10.0

    def __post_init__(self):
        values = astuple(self)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ValueError(f"weights must be finite and non-negative: {values}")
        if not any(v > 0 for v in values):
            raise ValueError("at least one weight must be positive")

    @classmethod
    def from_mapping(cls, data: Mapping[str, float]) -> "MetricWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def scaled(self, c: float) -> "MetricWeights":
        return MetricWeights(*(c * v for v in astuple(self)))


@dataclass(frozen=True)
class OpCounts:
    ES: int = 0
    EA: int = 0
    ED: int = 0
    ESM: int = 0
    FP: int = 0
    FN: int = 0

    def __post_init__(self):
        if any(v < 0 for v in astuple(self)):
            raise ValueError("operation counts must be non-negative")

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class AnnotatedGraph:
    """A lineage graph plus per-track point locations (and radii).

    ``positions[id]`` is a (len(track), 2) array of (x, y). ``radius`` is
    either one value for all tracks or a per-track mapping; it bounds the
    match distance for reference graphs and is ignored for predictions.
    """

    graph: LineageGraph
    positions: Mapping[int, np.ndarray]
    radius: float | Mapping[int, float] = math.inf

    def radius_of(self, track_id: int) -> float:
        if isinstance(self.radius, Mapping):
            return float(self.radius[track_id])
        return float(self.radius)

    def frame_points(self) -> list[list[tuple[int, float, float, float]]]:
        frames: list[list[tuple[int, float, float, float]]] = [
            [] for _ in range(self.graph.frame_count)
        ]
        for tr in self.graph.tracks:
            pos = np.asarray(self.positions[tr.id], dtype=float)
            if pos.shape != (len(tr), 2):
                raise FormatError(
                    f"track {tr.id}: {pos.shape[0] if pos.ndim else 0} points for "
                    f"{len(tr)} frames"
                )
            rad = self.radius_of(tr.id)
            for k, t in enumerate(range(tr.begin, tr.end + 1)):
                frames[t].append((tr.id, float(pos[k, 0]), float(pos[k, 1]), rad))
        return frames


def graph_edges(graph: LineageGraph) -> dict[tuple[Vertex, Vertex], str]:
    edges: dict[tuple[Vertex, Vertex], str] = {}
    table = graph.by_id()
    for tr in graph.tracks:
        for t in range(tr.begin, tr.end):
            edges[(tr.id, t), (tr.id, t + 1)] = TRACK_EDGE
        if tr.parent != NO_PARENT:
            p = table[tr.parent]
            edges[(p.id, p.end), (tr.id, tr.begin)] = PARENT_EDGE
    return edges


@dataclass(frozen=True)
class VertexMatch:
    """Per-frame partial one-to-one maps predicted id -> reference id."""

    pairs: tuple[dict[int, int], ...]
    unmatched_pred: tuple[tuple[int, ...], ...]
    unmatched_ref: tuple[tuple[int, ...], ...]
    split_points: tuple[tuple[int, ...], ...]

    def pred_to_ref(self) -> dict[Vertex, Vertex]:
        return {
            (p, t): (r, t) for t, frame in enumerate(self.pairs) for p, r in frame.items()
        }


def _check_unique(ids: Sequence[int], what: str, t: int) -> None:
    if len(set(ids)) != len(ids):
        raise FormatError(f"duplicate {what} ids in frame {t}")


def match_vertices(
    ref_points: Sequence[Sequence[tuple[int, float, float, float]]],
    pred_points: Sequence[Sequence[tuple[int, float, float]]],
    match_radius: float,
) -> VertexMatch:
    """Per-frame maximum-cardinality, minimum-distance point assignment.

    ``ref_points[t]`` holds ``(id, x, y, radius)``, ``pred_points[t]`` holds
    ``(id, x, y)``. A pair is admissible when its distance is at most
    ``min(match_radius, radius)``. Rows and columns are ordered by id before
    solving so ties resolve identically on every run.
    """
    if not match_radius > 0:
        raise ValueError("match_radius must be positive")
    if len(ref_points) != len(pred_points):
        raise FormatError("reference and prediction cover different frame counts")
    pairs, un_p, un_r, split = [], [], [], []
    for t, (refs, preds) in enumerate(zip(ref_points, pred_points)):
        refs = sorted(refs, key=lambda q: q[0])
        preds = sorted(preds, key=lambda q: q[0])
        _check_unique([q[0] for q in refs], "reference", t)
        _check_unique([q[0] for q in preds], "predicted", t)
        frame_pairs: dict[int, int] = {}
        if refs and preds:
            rxy = np.array([[q[1], q[2]] for q in refs])
            pxy = np.array([[q[1], q[2]] for q in preds])
            reach = np.minimum(match_radius, np.array([q[3] for q in refs]))
            dist = np.hypot(*(rxy[:, None, :] - pxy[None, :, :]).transpose(2, 0, 1))
            ok = dist <= reach[:, None]
            if ok.any():
                big = 1.0 + min(len(refs), len(preds)) * float(dist[ok].max())
                rows, cols = linear_sum_assignment(np.where(ok, dist, big))
                for i, j in zip(rows, cols):
                    if ok[i, j]:
                        frame_pairs[preds[j][0]] = refs[i][0]
            taken = set(frame_pairs.values())
            free_ref = [i for i, q in enumerate(refs) if q[0] not in taken]
            covering = [
                preds[j][0]
                for j in range(len(preds))
                if preds[j][0] in frame_pairs and any(ok[i, j] for i in free_ref)
            ]
        else:
            covering = []
        pairs.append(frame_pairs)
        matched_refs = set(frame_pairs.values())
        un_p.append(tuple(q[0] for q in preds if q[0] not in frame_pairs))
        un_r.append(tuple(q[0] for q in refs if q[0] not in matched_refs))
        split.append(tuple(covering))
    return VertexMatch(tuple(pairs), tuple(un_p), tuple(un_r), tuple(split))


def count_operations(
    ref: AnnotatedGraph, pred: AnnotatedGraph, match: VertexMatch
) -> OpCounts:
    """Edit-operation counts turning ``pred`` into ``ref`` under ``match``."""
    p2r = match.pred_to_ref()
    r2p = {v: k for k, v in p2r.items()}
    ref_edges = graph_edges(ref.graph)
    pred_edges = graph_edges(pred.graph)
    ed = esm = 0
    for (a, b), kind in pred_edges.items():
        if a not in p2r or b not in p2r:
            continue
        ref_kind = ref_edges.get((p2r[a], p2r[b]))
        if ref_kind is None:
            ed += 1
        elif ref_kind != kind:
            esm += 1
    ea = 0
    for x, y in ref_edges:
        if x not in r2p or y not in r2p or (r2p[x], r2p[y]) not in pred_edges:
            ea += 1
    return OpCounts(
        ES=sum(len(s) for s in match.split_points),
        EA=ea,
        ED=ed,
        ESM=esm,
        FP=sum(len(u) for u in match.unmatched_pred),
        FN=sum(len(u) for u in match.unmatched_ref),
    )


def aogm(counts: OpCounts, w: MetricWeights) -> float:
    """Weighted sum of the six operation counts."""
    return (
        w.w_ES * counts.ES
        + w.w_EA * counts.EA
        + w.w_ED * counts.ED
        + w.w_ESM * counts.ESM
        + w.w_FP * counts.FP
        + w.w_FN * counts.FN
    )


def empty_counts(ref: LineageGraph) -> OpCounts:
    """Counts for an empty prediction: every vertex missed, every edge added."""
    return OpCounts(EA=len(graph_edges(ref)), FN=ref.vertex_count())


def tra_from_counts(counts: OpCounts, counts_empty: OpCounts, w: MetricWeights) -> float:
    aogm0 = aogm(counts_empty, w)
    if aogm0 <= 0:
        raise UndefinedMetric("AOGM of the empty result is zero; TRA undefined")
    return 1.0 - min(aogm(counts, w), aogm0) / aogm0


@dataclass(frozen=True)
class EvalReport:
    counts: OpCounts
    aogm: float
    aogm0: float
    tra: float

    def as_dict(self) -> dict[str, float]:
        out: dict[str, float] = dict(self.counts.as_dict())
        out.update(AOGM=self.aogm, AOGM_0=self.aogm0, TRA=self.tra)
        return out


def evaluate(
    ref: AnnotatedGraph,
    pred: AnnotatedGraph,
    w: MetricWeights | None = None,
    match_radius: float = math.inf,
) -> EvalReport:
    w = w or MetricWeights()
    if ref.graph.vertex_count() == 0:
        raise UndefinedMetric("reference graph is empty")
    if pred.graph.frame_count != ref.graph.frame_count:
        raise FormatError(
            f"frame counts differ: ref {ref.graph.frame_count}, pred {pred.graph.frame_count}"
        )
    pred_pts = [[q[:3] for q in frame] for frame in pred.frame_points()]
    match = match_vertices(ref.frame_points(), pred_pts, match_radius)
    counts = count_operations(ref, pred, match)
    c0 = empty_counts(ref.graph)
    return EvalReport(counts, aogm(counts, w), aogm(c0, w), tra_from_counts(counts, c0, w))


def tra(
    ref: AnnotatedGraph,
    pred: AnnotatedGraph,
    w: MetricWeights | None = None,
    match_radius: float = math.inf,
) -> float:
    """TRA = 1 - min(AOGM, AOGM_0) / AOGM_0 in [0, 1]."""
    return evaluate(ref, pred, w, match_radius).tra
