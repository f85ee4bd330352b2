"""Cell identities, 3-slot point records and the lineage forest.

Every cell is a point. A record row carries three slots per frame: the cell
itself (slot 0, the mother ``M``) and two reserved daughter slots (``D1``,
``D2``). The binarized visibility triple of a row at one frame is one of

    (1, 0, 0)  undivided
    (0, 1, 0)  divided, only the first daughter present
    (0, 1, 1)  divided, both daughters present
    (0, 0, 0)  absent (not yet born, or dead)

Two row layouts are used in the package:

* *window layout* -- rows are the cells alive at the first frame of a window,
  daughters live in slots 1/2 for the rest of the window (tracker I/O and
  training targets, see :func:`window_records`);
* *sequence layout* -- one row per track; a mother row shows its daughters in
  slots 1/2 only on the hand-off frame, and each daughter continues in its own
  row, linked to the mother through ``row_parents`` (see
  :func:`points_from_graph`). This layout can express arbitrarily deep
  lineages.

:func:`graph_from_point_records` decodes either layout.
"""

from __future__ import annotations

import enum
import graphlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

MOTHER, D1, D2 = 0, 1, 2
NO_PARENT = 0


class InvalidPattern(ValueError):
    """A visibility triple outside the four admissible states."""


class RecordError(ValueError):
    """Point records that do not describe an irreversible cell history."""


class GraphError(ValueError):
    """A lineage graph violating the forest invariants."""


class PatternKind(enum.Enum):
    UNDIVIDED = (1, 0, 0)
    DIVIDED_ONE = (0, 1, 0)
    DIVIDED_TWO = (0, 1, 1)
    ABSENT = (0, 0, 0)


_PATTERNS = {kind.value: kind for kind in PatternKind}


def classify_slot_pattern(flags: Sequence[int | bool]) -> PatternKind:
    """Map a binary (M, D1, D2) triple to its :class:`PatternKind`."""
    key = tuple(int(bool(f)) for f in flags)
    if len(key) != 3 or any(f not in (0, 1) for f in flags):
        raise InvalidPattern(f"expected three binary flags, got {tuple(flags)!r}")
    try:
        return _PATTERNS[key]
    except KeyError:
        raise InvalidPattern(f"invalid slot pattern {key}") from None


@dataclass(frozen=True, order=True)
class TrackRecord:
    id: int
    begin: int
    end: int
    parent: int = NO_PARENT

    def __post_init__(self):
        if self.id <= 0:
            raise GraphError(f"track id must be positive, got {self.id}")
        if self.begin < 0 or self.begin > self.end:
            raise GraphError(f"track {self.id}: bad span [{self.begin}, {self.end}]")
        if self.parent < 0:
            raise GraphError(f"track {self.id}: negative parent id")

    def __len__(self) -> int:
        return self.end - self.begin + 1


@dataclass(frozen=True)
class LineageGraph:
    """Acyclic forest of tracks over ``frame_count`` frames.

    Tracks are stored sorted by id. Validation runs on construction.
    """

    tracks: tuple[TrackRecord, ...]
    frame_count: int

    def __post_init__(self):
        tracks = tuple(sorted(self.tracks))
        object.__setattr__(self, "tracks", tracks)
        self.validate()

    def validate(self) -> None:
        by_id: dict[int, TrackRecord] = {}
        for tr in self.tracks:
            if tr.id in by_id:
                raise GraphError(f"duplicate track id {tr.id}")
            if tr.end >= self.frame_count:
                raise GraphError(
                    f"track {tr.id} ends at {tr.end} >= frame_count {self.frame_count}"
                )
            by_id[tr.id] = tr
        n_children: dict[int, int] = {}
        sorter: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
        for tr in self.tracks:
            if tr.parent == NO_PARENT:
                sorter.add(tr.id)
                continue
            parent = by_id.get(tr.parent)
            if parent is None:
                raise GraphError(f"track {tr.id}: unknown parent {tr.parent}")
            if parent.end >= tr.begin:
                raise GraphError(
                    f"track {tr.id} begins at {tr.begin} but parent {parent.id} "
                    f"ends at {parent.end}"
                )
            n_children[parent.id] = n_children.get(parent.id, 0) + 1
            if n_children[parent.id] > 2:
                raise GraphError(f"track {parent.id} has more than two children")
            sorter.add(tr.id, tr.parent)
        try:
            tuple(sorter.static_order())
        except graphlib.CycleError as exc:
            raise GraphError(f"lineage contains a cycle: {exc.args[1]}") from None

    @property
    def ids(self) -> list[int]:
        return [tr.id for tr in self.tracks]

    def by_id(self) -> dict[int, TrackRecord]:
        return {tr.id: tr for tr in self.tracks}

    def children(self, track_id: int) -> list[TrackRecord]:
        return [tr for tr in self.tracks if tr.parent == track_id]

    def alive_at(self, t: int) -> list[TrackRecord]:
        return [tr for tr in self.tracks if tr.begin <= t <= tr.end]

    def vertex_count(self) -> int:
        return sum(len(tr) for tr in self.tracks)

    def __len__(self) -> int:
        return len(self.tracks)


def division_events(g: LineageGraph) -> list[tuple[int, int]]:
    """``(mother_id, t_div)`` for every track with children; ``t_div`` is the
    mother's last frame."""
    parents = {tr.parent for tr in g.tracks if tr.parent != NO_PARENT}
    table = g.by_id()
    return [(pid, table[pid].end) for pid in sorted(parents)]


@dataclass(frozen=True)
class PointRecords:
    """Row-major 3-slot trajectories and visibilities.

    ``L`` has shape (N, T, 3, 2) holding (x, y) in pixels, ``V`` has shape
    (N, T, 3). ``cell_ids`` names each row; ``row_parents`` holds the index of
    the row a row was spawned from, or -1.
    """

    L: np.ndarray
    V: np.ndarray
    cell_ids: np.ndarray
    row_parents: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.L, dtype=float)
        V = np.asarray(self.V, dtype=float)
        n = L.shape[0]
        ids = np.asarray(self.cell_ids, dtype=np.int64).reshape(n)
        parents = np.asarray(self.row_parents, dtype=np.int64).reshape(n)
        if L.ndim != 4 or L.shape[2:] != (3, 2):
            raise RecordError(f"L must be (N, T, 3, 2), got {L.shape}")
        if V.shape != L.shape[:3]:
            raise RecordError(f"V shape {V.shape} does not match L {L.shape}")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "cell_ids", ids)
        object.__setattr__(self, "row_parents", parents)

    @property
    def n_rows(self) -> int:
        return self.L.shape[0]

    @property
    def n_frames(self) -> int:
        return self.L.shape[1]


@dataclass
class _RowDecode:
    mother: tuple[int, int] | None
    daughters: list[tuple[int, int, int]]  # (slot, begin, end)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return list(zip(starts.tolist(), ends.tolist()))


def _decode_row(flags: np.ndarray, row: int) -> _RowDecode:
    for t in range(flags.shape[0]):
        try:
            classify_slot_pattern(flags[t])
        except InvalidPattern as exc:
            raise InvalidPattern(f"row {row}, frame {t}: {exc}") from None
    visible = flags.any(axis=1)
    vis_runs = _runs(visible)
    if len(vis_runs) > 1:
        raise RecordError(
            f"row {row}: cell reappears at frame {vis_runs[1][0]} after being absent"
        )
    mother_runs = _runs(flags[:, MOTHER].astype(bool))
    mother = mother_runs[0] if mother_runs else None
    if len(mother_runs) > 1:
        raise RecordError(f"row {row}: undivided state resumes at frame {mother_runs[1][0]}")
    daughters = []
    for slot in (D1, D2):
        runs = _runs(flags[:, slot].astype(bool))
        if len(runs) > 1:
            raise RecordError(f"row {row}: daughter slot {slot} reappears at frame {runs[1][0]}")
        if runs:
            b, e = runs[0]
            if mother is not None and b <= mother[1]:
                raise RecordError(f"row {row}: daughter slot {slot} visible before division")
            daughters.append((slot, b, e))
    if mother is not None and daughters and daughters[0][1] != mother[1] + 1:
        raise RecordError(f"row {row}: gap between mother end and first daughter")
    return _RowDecode(mother, daughters)


def decode_point_records(
    L: np.ndarray,
    V: np.ndarray,
    threshold: float = 0.5,
    row_parents: Sequence[int] | np.ndarray | None = None,
    row_ids: Sequence[int] | np.ndarray | None = None,
) -> tuple[LineageGraph, dict[int, tuple[int, int]]]:
    """Decode point records into a lineage graph plus a track -> (row, slot) map.

    Each row's run of undivided frames becomes one track. When a daughter slot
    first becomes visible, daughter tracks are created with the row's track as
    parent, unless other rows declare this row as their parent in
    ``row_parents``; those rows then carry the daughters and the slot runs are
    only validated. Track ids follow ``row_ids`` for row tracks when given
    (slot-only daughters get fresh ids above the largest row id); otherwise
    ids are assigned in discovery order starting at 1.
    """
    L = np.asarray(L, dtype=float)
    V = np.asarray(V, dtype=float)
    if L.ndim != 4 or L.shape[2:] != (3, 2) or V.shape != L.shape[:3]:
        raise RecordError(f"inconsistent shapes L{L.shape} V{V.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    n, T = V.shape[:2]
    parents = (
        np.full(n, -1, dtype=np.int64) if row_parents is None else np.asarray(row_parents)
    )
    if parents.shape != (n,):
        raise RecordError("row_parents must have one entry per row")
    flags = (V >= threshold).astype(np.int8)

    child_rows: dict[int, list[int]] = {}
    for r, p in enumerate(parents.tolist()):
        if p >= 0:
            if p >= r:
                raise RecordError(f"row {r}: parent row {p} must precede it")
            child_rows.setdefault(p, []).append(r)

    next_free = 1 if row_ids is None else int(np.max(row_ids, initial=0)) + 1

    def fresh() -> int:
        nonlocal next_free
        tid = next_free
        next_free += 1
        return tid

    tracks: list[TrackRecord] = []
    where: dict[int, tuple[int, int]] = {}
    row_track: dict[int, int] = {}
    for r in range(n):
        dec = _decode_row(flags[r], r)
        parent_id = NO_PARENT
        if parents[r] >= 0:
            mother_row = int(parents[r])
            if mother_row not in row_track:
                raise RecordError(f"row {r}: parent row {mother_row} has no mother track")
            parent_id = row_track[mother_row]
            if dec.mother is None:
                raise RecordError(f"row {r}: spawned row never shows its own cell")
        if dec.mother is not None:
            tid = int(row_ids[r]) if row_ids is not None else fresh()
            tracks.append(TrackRecord(tid, dec.mother[0], dec.mother[1], parent_id))
            where[tid] = (r, MOTHER)
            row_track[r] = tid
        if r in child_rows:
            if dec.mother is None or not dec.daughters:
                raise RecordError(f"row {r}: has spawned rows but never divides")
            continue
        mother_id = row_track.get(r, NO_PARENT)
        for slot, b, e in dec.daughters:
            tid = fresh()
            tracks.append(TrackRecord(tid, b, e, mother_id))
            where[tid] = (r, slot)
    return LineageGraph(tuple(tracks), T), where


def graph_from_point_records(
    L: np.ndarray,
    V: np.ndarray,
    threshold: float = 0.5,
    row_parents: Sequence[int] | np.ndarray | None = None,
    row_ids: Sequence[int] | np.ndarray | None = None,
) -> LineageGraph:
    """Lineage graph described by 3-slot point records; see
    :func:`decode_point_records`."""
    return decode_point_records(L, V, threshold, row_parents, row_ids)[0]


def track_locations(
    records: PointRecords, where: Mapping[int, tuple[int, int]], graph: LineageGraph
) -> dict[int, np.ndarray]:
    """Per-track (len, 2) location arrays read from the decoded row/slot."""
    out = {}
    for tr in graph.tracks:
        r, slot = where[tr.id]
        out[tr.id] = records.L[r, tr.begin : tr.end + 1, slot].copy()
    return out


def points_from_graph(
    graph: LineageGraph, positions: Mapping[int, np.ndarray]
) -> PointRecords:
    """Sequence-layout point records: one row per track, in id order.

    ``positions[id]`` is a (len(track), 2) array of (x, y). A mother row shows
    its daughters in slots 1/2 on their birth frames (the hand-off), after
    which the daughters continue in their own rows.
    """
    T = graph.frame_count
    n = len(graph)
    L = np.zeros((n, T, 3, 2))
    V = np.zeros((n, T, 3))
    row_of = {tr.id: r for r, tr in enumerate(graph.tracks)}
    parents = np.full(n, -1, dtype=np.int64)
    for r, tr in enumerate(graph.tracks):
        pos = np.asarray(positions[tr.id], dtype=float)
        if pos.shape != (len(tr), 2):
            raise RecordError(f"track {tr.id}: positions shape {pos.shape} != ({len(tr)}, 2)")
        L[r, tr.begin : tr.end + 1, MOTHER] = pos
        V[r, tr.begin : tr.end + 1, MOTHER] = 1.0
        # park invisible slots at the nearest known location
        L[r, : tr.begin, :] = pos[0]
        L[r, tr.end + 1 :, :] = pos[-1]
        L[r, tr.begin : tr.end + 1, D1:] = pos[:, None, :]
        if tr.parent != NO_PARENT:
            parents[r] = row_of[tr.parent]
    for tr in graph.tracks:
        kids = sorted(graph.children(tr.id), key=lambda c: (c.begin, c.id))
        if not kids:
            continue
        r = row_of[tr.id]
        last_begin = kids[-1].begin
        for slot, kid in zip((D1, D2), kids):
            kpos = np.asarray(positions[kid.id], dtype=float)
            stop = min(kid.end, last_begin)
            if stop < last_begin:
                raise RecordError(
                    f"track {kid.id} ends before its sibling is born; not representable"
                )
            span = slice(kid.begin, stop + 1)
            L[r, span, slot] = kpos[: stop - kid.begin + 1]
            V[r, span, slot] = 1.0
    ids = np.array([tr.id for tr in graph.tracks], dtype=np.int64)
    return PointRecords(L, V, ids, parents)


def window_records(
    graph: LineageGraph,
    positions: Mapping[int, np.ndarray],
    t0: int,
    length: int,
) -> PointRecords:
    """Window-layout records for frames ``[t0, t0 + length)``.

    Rows are the tracks alive at ``t0`` (id order). Each row's daughters are
    followed in slots 1/2 for as long as they live inside the window; slot 1
    holds the longer-lived daughter so that the D2-only pattern never occurs.
    Granddaughters are not represented.
    """
    if length < 1 or t0 < 0 or t0 + length > graph.frame_count:
        raise ValueError(f"window [{t0}, {t0 + length}) outside the sequence")
    rows = graph.alive_at(t0)
    n = len(rows)
    L = np.zeros((n, length, 3, 2))
    V = np.zeros((n, length, 3))
    stop = t0 + length

    def fill(r: int, slot: int, tr: TrackRecord, cutoff: int) -> tuple[int, int] | None:
        b, e = max(tr.begin, t0), min(tr.end, cutoff - 1)
        if b > e:
            return None
        pos = np.asarray(positions[tr.id], dtype=float)
        L[r, b - t0 : e - t0 + 1, slot] = pos[b - tr.begin : e - tr.begin + 1]
        V[r, b - t0 : e - t0 + 1, slot] = 1.0
        return b, e

    for r, tr in enumerate(rows):
        span = fill(r, MOTHER, tr, stop)
        last = positions[tr.id][span[1] - tr.begin]
        # unsupervised slots start from the last known mother location
        for slot in (D1, D2):
            L[r, :, slot] = np.where(V[r, :, MOTHER, None] > 0, L[r, :, MOTHER], last)
        L[r, span[1] - t0 + 1 :, MOTHER] = last
        kids = sorted(graph.children(tr.id), key=lambda c: (-c.end, c.id))
        for slot, kid in zip((D1, D2), kids):
            fill(r, slot, kid, stop)
    ids = np.array([tr.id for tr in rows], dtype=np.int64)
    return PointRecords(L, V, ids, np.full(n, -1, dtype=np.int64))
