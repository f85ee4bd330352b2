"""Rolling-window inference with query growth on detected divisions."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FeatureConfig, FeatureEncoder, extract_pyramid, sample_features
from .lineage import D1, D2, MOTHER, LineageGraph, PointRecords, decode_point_records, track_locations
from .queries import QuerySet
from .tracker.engine import NumericError, initial_state, iterate
from .tracker.operators import UpdateOperator

log = logging.getLogger(__name__)

# query coordinates are snapped to this grid so lattice moves of the argmax
# operator stay exact in floating point across roll boundaries
SNAP = 2.0**-16


@dataclass(frozen=True)
class InferenceConfig:
    l_win: int = 100
    threshold: float = 0.5
    M: int = 4
    carry_templates: bool = True
    # a daughter closer than this (px) to a continuing row or to its
    # sibling duplicates a tracked cell and is not spawned
    spawn_separation: float = 4.0

    def __post_init__(self):
        if self.l_win < 2:
            raise ValueError("l_win must be at least 2")
        if self.spawn_separation < 0:
            raise ValueError("spawn_separation must be non-negative")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class PointTracker:
    """An update operator bound to an encoder and feature configuration."""

    op: UpdateOperator
    encoder: FeatureEncoder
    features: FeatureConfig
    _cache: dict = field(default_factory=dict, repr=False)

    def levels(self, frames: np.ndarray, t0: int, t1: int) -> list[np.ndarray]:
        """Stacked pyramid levels for frames [t0, t1), cached per frame."""
        key = id(frames)
        if self._cache.get("key") != key:
            self._cache = {"key": key, "frames": {}}
        store = self._cache["frames"]
        for t in range(t0, t1):
            if t not in store:
                store[t] = extract_pyramid(frames[t], self.encoder, self.features).levels
        return [np.stack([store[t][s] for t in range(t0, t1)]) for s in range(self.features.S)]

    def template(self, frames: np.ndarray, t: int, xy: np.ndarray) -> np.ndarray:
        return sample_features(self.levels(frames, t, t + 1)[0][0], xy, self.features.k)

    def run_window(self, frames, t0, t1, xy, templates, M):
        levels = self.levels(frames, t0, t1)
        L0, V_in, F = initial_state(levels, xy, self.features, templates)
        return iterate(self.op, levels, L0, V_in, F, M, self.features)


@dataclass(frozen=True)
class Detection:
    frame: int
    spawns: tuple[tuple[int, int, float, float], ...]  # (mother id, slot, x, y)


def detect_new_cells(
    V: np.ndarray,
    L: np.ndarray,
    row_ids: Sequence[int],
    already_spawned: set[int] | frozenset = frozenset(),
    threshold: float = 0.5,
    first_frame: int = 1,
) -> Detection | None:
    """Earliest window frame (>= ``first_frame``) at which a daughter slot of
    a not-yet-divided row becomes visible.

    Returns every activation on that frame ordered by slot (D1 before D2),
    then mother id.
    """
    V = np.asarray(V)
    L = np.asarray(L)
    active = [r for r, cid in enumerate(row_ids) if int(cid) not in already_spawned]
    if not active:
        return None
    on = V[active][:, first_frame:, D1:] >= threshold  # (n, T', 2)
    hit = on.any(axis=(0, 2))
    if not hit.any():
        return None
    t = first_frame + int(np.argmax(hit))
    found = []
    for slot in (D1, D2):
        for r in sorted(active, key=lambda r: int(row_ids[r])):
            if V[r, t, slot] >= threshold:
                x, y = L[r, t, slot]
                found.append((int(row_ids[r]), slot, float(x), float(y)))
    return Detection(t, tuple(found))


def _clean_rows(V: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Force each row into an irreversible history.

    Returns the cleaned visibilities and, per row, the first frame at which
    the cell is no longer undivided (``T`` if never). Frame 0 is taken as
    undivided since queries are existing cells.
    """
    V = V.copy()
    N, T = V.shape[:2]
    V[:, 0, MOTHER] = np.maximum(V[:, 0, MOTHER], threshold)
    V[:, 0, D1:] = np.minimum(V[:, 0, D1:], np.nextafter(threshold, 0))
    change = np.full(N, T)
    for n in range(N):
        b = V[n] >= threshold
        undiv = b[:, MOTHER] & ~b[:, D1] & ~b[:, D2]
        off = np.flatnonzero(~undiv)
        if off.size == 0:
            continue
        t = int(off[0])
        change[n] = t
        if not (b[t, D1] or b[t, D2]):
            V[n, t:] = np.minimum(V[n, t:], np.nextafter(threshold, 0))
            continue
        # division: the mother slot is off from here on, D1 before D2
        V[n, t:, MOTHER] = np.minimum(V[n, t:, MOTHER], np.nextafter(threshold, 0))
        if b[t, D2] and not b[t, D1]:
            V[n, t:, D1], V[n, t:, D2] = V[n, t:, D2].copy(), V[n, t:, D1].copy()
        for slot in (D1, D2):
            run = V[n, t:, slot] >= threshold
            if run.any() and not run[0]:
                V[n, t:, slot] = np.minimum(V[n, t:, slot], np.nextafter(threshold, 0))
                continue
            stop = int(np.argmin(run)) if not run.all() else run.size
            V[n, t + stop :, slot] = np.minimum(V[n, t + stop :, slot], np.nextafter(threshold, 0))
        d1 = V[n, t:, D1] >= threshold
        V[n, t:, D2] = np.where(d1, V[n, t:, D2], np.minimum(V[n, t:, D2], np.nextafter(threshold, 0)))
    return V, change


@dataclass
class RawResult:
    records: PointRecords
    n_rolls: int
    roll_starts: list[int]
    query_sizes: list[int]
    spawned: dict[int, int] = field(default_factory=dict)  # daughter id -> mother id

    def decode(self, threshold: float = 0.5) -> tuple[LineageGraph, dict[int, np.ndarray]]:
        rec = self.records
        graph, where = decode_point_records(rec.L, rec.V, threshold, rec.row_parents, rec.cell_ids)
        return graph, track_locations(rec, where, graph)


def _snap(xy: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(xy, float) / SNAP) * SNAP


def raw_infer(
    tracker: PointTracker,
    frames: np.ndarray,
    queries: QuerySet,
    cfg: InferenceConfig = InferenceConfig(),
) -> RawResult:
    """Track every query through ``frames`` (T, H, W).

    Sequences no longer than ``l_win`` are processed in one window; daughters
    then stay in the mother's slots 1/2. Longer sequences are processed in
    rolls: a roll covers ``[t_cur, t_cur + l_win)``; at the first frame where
    a division is detected the daughters become new rows (parent = the
    mother's row), the mother row ends, and the next roll starts there.
    Without detections the next roll starts at the roll's last frame.
    Output rows follow the sequence layout of :func:`points_from_graph`.
    """
    frames = np.asarray(frames, dtype=float)
    T = frames.shape[0]
    if T == 0 or len(queries) == 0:
        raise ValueError("need at least one frame and one query")
    thr = cfg.threshold

    if T <= cfg.l_win:
        log.info("single pass over %d frames (l_win=%d)", T, cfg.l_win)
        xy = _snap(queries.xy)
        try:
            res = tracker.run_window(frames, 0, T, xy, None, cfg.M)
        except NumericError as exc:
            exc.roll = 0
            raise
        V, _ = _clean_rows(res.V, thr)
        L = res.L.copy()
        rec = PointRecords(L, V, queries.ids, np.full(len(queries), -1))
        return RawResult(rec, 1, [0], [len(queries)])

    # row bookkeeping, grown as daughters are spawned
    ids = list(int(i) for i in queries.ids)
    parents = [-1] * len(ids)
    L_out = [np.zeros((T, 3, 2)) for _ in ids]
    V_out = [np.zeros((T, 3)) for _ in ids]
    xy = {cid: p for cid, p in zip(ids, _snap(queries.xy))}
    templates: dict[int, np.ndarray] = {}
    active = list(range(len(ids)))
    next_id = max(ids) + 1
    spawned: dict[int, int] = {}
    t_cur, rolls, starts, sizes = 0, 0, [], []

    while t_cur + 1 < T:
        if not active:
            break
        t_end = min(t_cur + cfg.l_win, T)
        act_ids = [ids[r] for r in active]
        q = np.array([xy[c] for c in act_ids])
        if not cfg.carry_templates:
            templates.clear()
        missing = [c for c in act_ids if c not in templates]
        if missing:
            fresh = tracker.template(frames, t_cur, np.array([xy[c] for c in missing]))
            templates.update(zip(missing, fresh))
        tmpl = np.array([templates[c] for c in act_ids])
        try:
            res = tracker.run_window(frames, t_cur, t_end, q, tmpl, cfg.M)
        except NumericError as exc:
            exc.roll = rolls
            raise
        rolls += 1
        starts.append(t_cur)
        sizes.append(len(active))
        V, change = _clean_rows(res.V, thr)
        L = res.L
        state = res.history_L[-1][:, :, MOTHER]
        det = detect_new_cells(V, L, act_ids, threshold=thr)
        if det is not None:
            stop = det.frame
        else:
            stop = t_end - t_cur - 1
        for i, r in enumerate(active):
            L_out[r][t_cur : t_cur + stop + 1] = L[i, : stop + 1]
            V_out[r][t_cur : t_cur + stop + 1] = V[i, : stop + 1]
        t_next = t_cur + stop
        survivors = []
        taken = []
        for i, r in enumerate(active):
            if change[i] > stop:
                xy[ids[r]] = state[i, stop]
                survivors.append(r)
                taken.append(state[i, stop])
        for i, r in enumerate(active):
            # divided or dead rows end here; a division detected on this frame spawns its daughters
            if change[i] != stop or det is None or V[i, stop, D1] < thr:
                continue
            kids = []
            for slot in (D1, D2):
                p = _snap(L[i, stop, slot])
                if V[i, stop, slot] >= thr and all(np.hypot(*(p - q)) >= cfg.spawn_separation for q in taken + kids):
                    kids.append(p)
            if len(kids) < (V[i, stop, D1:] >= thr).sum():
                log.debug("cell %d at frame %d: daughter on a tracked cell dropped", ids[r], t_next)
            for p in kids:
                taken.append(p)
                ids.append(next_id)
                parents.append(r)
                Lr = np.zeros((T, 3, 2))
                Vr = np.zeros((T, 3))
                Lr[t_next] = p
                Vr[t_next, MOTHER] = 1.0
                L_out.append(Lr)
                V_out.append(Vr)
                xy[next_id] = p
                spawned[next_id] = ids[r]
                survivors.append(len(ids) - 1)
                next_id += 1
        active = sorted(survivors)
        t_cur = t_next

    L_all = np.stack(L_out)
    V_all = np.stack(V_out)
    # park hidden slots on the nearest visible point for readability
    for r in range(len(ids)):
        vis = np.flatnonzero(V_all[r].max(axis=1) >= thr)
        if vis.size:
            L_all[r, : vis[0]] = L_all[r, vis[0], MOTHER]
            L_all[r, vis[-1] + 1 :] = L_all[r, vis[-1], MOTHER]
    rec = PointRecords(L_all, V_all, np.array(ids), np.array(parents))
    return RawResult(rec, rolls, starts, sizes, spawned)
