"""On-disk formats: PGM/PPM images, track tables, point tables and JSON."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .lineage import LineageGraph, PointRecords, TrackRecord
from .queries import QuerySet

FRAME_NAME = "t{:04d}.pgm"
_FRAME_RE = re.compile(r"t(\d{4,})\.pgm$")
POINTS_HEADER = ("frame", "cell", "slot", "x", "y", "vis")


class FormatError(ValueError):
    pass


# --- images -----------------------------------------------------------------


def _read_netpbm(path: Path, magic: bytes) -> tuple[np.ndarray, int, int]:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise FormatError(f"{path}: truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, got {tokens[0][:2]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    return np.frombuffer(data, np.uint8, offset=pos + 1), h, w


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a [0, 1] float image as 8-bit binary PGM."""
    a = np.round(np.clip(np.asarray(img, float), 0.0, 1.0) * 255).astype(np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    px, h, w = _read_netpbm(Path(path), b"P5")
    if px.size < h * w:
        raise FormatError(f"{path}: expected {h * w} pixels, found {px.size}")
    return px[: h * w].reshape(h, w) / 255.0


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    a = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = a.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + a.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    px, h, w = _read_netpbm(Path(path), b"P6")
    return px[: h * w * 3].reshape(h, w, 3).copy()


def write_frames(directory: str | Path, frames: np.ndarray) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        write_pgm(d / FRAME_NAME.format(t), f)


def read_frames(directory: str | Path) -> np.ndarray:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"{d}: not a directory")
    found = {}
    for p in d.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise FormatError(f"{d}: no frames named t0000.pgm ...")
    if sorted(found) != list(range(len(found))):
        raise FormatError(f"{d}: frame numbering is not contiguous from 0")
    frames = [read_pgm(found[t]) for t in range(len(found))]
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{d}: frames differ in size")
    return np.stack(frames)


# --- track table ------------------------------------------------------------


def write_tracks(path: str | Path, graph: LineageGraph) -> None:
    lines = [f"{tr.id} {tr.begin} {tr.end} {tr.parent}" for tr in graph.tracks]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_tracks(path: str | Path, frame_count: int | None = None) -> LineageGraph:
    """Parse ``<id> <begin> <end> <parent>`` lines. The frame count defaults
    to one past the latest end."""
    tracks = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{n}: expected 4 integers, got {len(parts)} fields")
        try:
            tracks.append(TrackRecord(*(int(p) for p in parts)))
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
    if frame_count is None:
        frame_count = max((tr.end for tr in tracks), default=-1) + 1
    try:
        return LineageGraph(tuple(tracks), frame_count)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- point table ------------------------------------------------------------


@dataclass(frozen=True)
class PointsTable:
    frame: np.ndarray
    cell: np.ndarray
    slot: np.ndarray
    x: np.ndarray
    y: np.ndarray
    vis: np.ndarray

    def __post_init__(self):
        for name in ("frame", "cell", "slot"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("x", "y", "vis"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.frame.size
        if any(getattr(self, f).shape != (n,) for f in POINTS_HEADER):
            raise FormatError("point table columns differ in length")
        keys = set(zip(self.frame.tolist(), self.cell.tolist(), self.slot.tolist()))
        if len(keys) != n:
            raise FormatError("duplicate (frame, cell, slot) entries")
        # canonical row order so that write/read is the identity
        order = np.lexsort((self.slot, self.cell, self.frame))
        for name in POINTS_HEADER:
            object.__setattr__(self, name, getattr(self, name)[order])

    def __len__(self) -> int:
        return int(self.frame.size)

    @classmethod
    def from_records(cls, rec: PointRecords, threshold: float | None = 0.5) -> "PointsTable":
        """Entries of ``rec``; with a threshold only visible slots are kept."""
        n, t, s = np.indices(rec.V.shape)
        keep = np.ones(rec.V.shape, bool) if threshold is None else rec.V >= threshold
        return cls(t[keep], rec.cell_ids[n[keep]], s[keep], rec.L[..., 0][keep], rec.L[..., 1][keep],
                   rec.V[keep])

    def queries(self, frame: int = 0, threshold: float = 0.5) -> QuerySet:
        sel = (self.frame == frame) & (self.slot == 0) & (self.vis >= threshold)
        if not sel.any():
            raise FormatError(f"no visible slot-0 points on frame {frame}")
        return QuerySet(self.cell[sel], np.stack([self.x[sel], self.y[sel]], axis=1))

    def track_positions(self, graph: LineageGraph) -> dict[int, np.ndarray]:
        """Per-track (len, 2) positions from the slot-0 entries."""
        lookup = {
            (int(c), int(t)): (x, y)
            for t, c, s, x, y in zip(self.frame, self.cell, self.slot, self.x, self.y)
            if s == 0
        }
        out = {}
        for tr in graph.tracks:
            try:
                out[tr.id] = np.array([lookup[(tr.id, t)] for t in range(tr.begin, tr.end + 1)])
            except KeyError as exc:
                raise FormatError(f"track {tr.id}: no point for frame {exc.args[0][1]}") from None
        return out


def write_points(path: str | Path, table: PointsTable) -> None:
    lines = ["\t".join(POINTS_HEADER)]
    for i in range(len(table)):
        lines.append(
            f"{table.frame[i]}\t{table.cell[i]}\t{table.slot[i]}\t"
            f"{table.x[i]:.3f}\t{table.y[i]:.3f}\t{table.vis[i]:.4f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_points(path: str | Path) -> PointsTable:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split()) != POINTS_HEADER:
        raise FormatError(f"{path}: header must be '{' '.join(POINTS_HEADER)}'")
    cols: list[list[Any]] = [[] for _ in POINTS_HEADER]
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise FormatError(f"{path}:{n}: expected 6 tab-separated fields")
        try:
            vals = [int(p) for p in parts[:3]] + [float(p) for p in parts[3:]]
        except ValueError:
            raise FormatError(f"{path}:{n}: malformed number") from None
        for c, v in zip(cols, vals):
            c.append(v)
    try:
        return PointsTable(*cols)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


# --- JSON -------------------------------------------------------------------


def read_json(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise FormatError(f"{path}: expected a JSON object")
    return data


def write_json(path: str | Path, data: dict[str, Any]) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

