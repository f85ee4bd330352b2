"""Command-line entry point: synth, track, eval, train, report."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io
from .features import FeatureConfig
from .lineage import LineageGraph, points_from_graph
from .metrics import AnnotatedGraph, MetricWeights, evaluate
from .pipeline import AnnotatedSequence, JobError, TrainJob, deterministic_tracker, fit, learned_tracker
from .raw import InferenceConfig, raw_infer
from .synth import ConfigError, SynthConfig, generate
from .tracker.checkpoint import CheckpointError, load_operator, save_operator
from .tracker.engine import NumericError
from .tracker.training import TrainingDiverged

log = logging.getLogger("cellpoint")

EXIT_USAGE = 2
EXIT_NUMERIC = 3
REPORT_FIELDS = ("ES", "EA", "ED", "ESM", "FP", "FN", "AOGM", "AOGM_0", "TRA")


class UsageError(Exception):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_sequence(d: Path) -> AnnotatedSequence:
    frames = io.read_frames(d)
    graph = io.read_tracks(_require(d / "man_track.txt", "track table"), frames.shape[0])
    pts = io.read_points(_require(d / "gt_points.tsv", "point table"))
    return AnnotatedSequence(frames, graph, pts.track_positions(graph))


def _write_result(out: Path, graph: LineageGraph, positions) -> None:
    out.mkdir(parents=True, exist_ok=True)
    io.write_tracks(out / "res_track.txt", graph)
    io.write_points(out / "res_points.tsv", io.PointsTable.from_records(points_from_graph(graph, positions)))


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    data = io.read_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = SynthConfig.from_mapping(data)
    seq = generate(cfg)
    out = Path(args.out)
    io.write_frames(out, seq.frames)
    io.write_tracks(out / "man_track.txt", seq.truth_graph)
    io.write_points(out / "gt_points.tsv", io.PointsTable.from_records(seq.records))
    io.write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {seq.frames.shape[0]} frames and {len(seq.truth_graph)} tracks to {out}")
    return 0


def cmd_track(args) -> int:
    frames = io.read_frames(_require(Path(args.frames), "frames directory"))
    queries = io.read_points(_require(Path(args.queries), "query file")).queries()
    if args.operator == "learned":
        if not args.weights:
            raise UsageError("--operator learned requires --weights")
        tracker = learned_tracker(load_operator(_require(Path(args.weights), "weights")))
    else:
        f = FeatureConfig()
        tracker = deterministic_tracker(args.dim, f.k, f.S, f.delta)
    cfg = InferenceConfig(l_win=args.lwin, threshold=args.threshold, M=args.M)
    t0 = time.perf_counter()
    res = raw_infer(tracker, frames, queries, cfg)
    graph, pos = res.decode(cfg.threshold)
    elapsed = time.perf_counter() - t0
    _write_result(Path(args.out), graph, pos)
    print(f"inference time: {elapsed:.3f} s ({res.n_rolls} rolls, {len(graph)} tracks)")
    return 0


def _radius(ref_dir: Path, given: float | None) -> float:
    if given is not None:
        return given
    cfg_path = ref_dir / "config.json"
    if cfg_path.exists():
        return SynthConfig.from_mapping(io.read_json(cfg_path)).cell_radius
    return math.inf


def cmd_eval(args) -> int:
    ref_dir, res_dir = Path(args.ref), Path(args.res)
    ref_g = io.read_tracks(_require(ref_dir / "man_track.txt", "reference track table"))
    res_g = io.read_tracks(_require(res_dir / "res_track.txt", "result track table"))
    T = max(ref_g.frame_count, res_g.frame_count)
    try:
        T = max(T, io.read_frames(ref_dir).shape[0])
    except io.FormatError:
        pass
    ref_g = LineageGraph(ref_g.tracks, T)
    res_g = LineageGraph(res_g.tracks, T)
    ref_p = io.read_points(_require(ref_dir / "gt_points.tsv", "reference points")).track_positions(ref_g)
    res_p = io.read_points(_require(res_dir / "res_points.tsv", "result points")).track_positions(res_g)
    w = MetricWeights.from_mapping(io.read_json(args.weights_aogm)) if args.weights_aogm else MetricWeights()
    radius = _radius(ref_dir, args.radius)
    rep = evaluate(AnnotatedGraph(ref_g, ref_p, radius), AnnotatedGraph(res_g, res_p), w, match_radius=radius)
    row = rep.as_dict()
    print(" ".join(REPORT_FIELDS))
    print(" ".join(str(row[k]) if k in rep.counts.as_dict() else f"{row[k]:.6f}" for k in REPORT_FIELDS))
    io.write_json(res_dir / "report.json", row)
    return 0


def cmd_train(args) -> int:
    job_data = io.read_json(args.config) if args.config else {}
    if args.seed is not None:
        job_data["seed"] = args.seed
    job = TrainJob.from_mapping(job_data)
    sources = [_load_sequence(Path(d)) for d in args.data]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    curve_path = out.with_name("loss_curve.csv")
    t0 = time.perf_counter()
    op, result = fit(sources, job, on_epoch=lambda e, a, b: log.info("epoch %d  L_tra %.4f  L_vis %.4f", e, a, b))
    save_operator(out, op)
    with open(curve_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "L_tra", "L_vis"])
        for e, a, b in result.curve:
            wr.writerow([e, repr(a), repr(b)])
    print(f"trained {len(result.step_losses)} steps in {time.perf_counter() - t0:.1f} s -> {out}")
    return 0


_PALETTE = np.array(
    [[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48], [145, 30, 180],
     [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212]],
    dtype=np.uint8,
)


def overlay(frame: np.ndarray, table: io.PointsTable, t: int, arm: int = 2) -> np.ndarray:
    """Grey frame with a coloured cross on every visible point of frame ``t``."""
    g = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(g[..., None], 3, axis=2)
    H, W = g.shape
    sel = (table.frame == t) & (table.vis >= 0.5)
    for c, x, y in zip(table.cell[sel], table.x[sel], table.y[sel]):
        col = _PALETTE[int(c) % len(_PALETTE)]
        cx, cy = int(np.floor(x)), int(np.floor(y))
        for d in range(-arm, arm + 1):
            if 0 <= cy < H and 0 <= cx + d < W:
                rgb[cy, cx + d] = col
            if 0 <= cy + d < H and 0 <= cx < W:
                rgb[cy + d, cx] = col
    return rgb


def cmd_report(args) -> int:
    rep = io.read_json(_require(Path(args.eval), "evaluation report"))
    missing = [k for k in REPORT_FIELDS if k not in rep]
    if missing:
        raise io.FormatError(f"{args.eval}: missing fields {missing}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# Tracking report", "", "| metric | value |", "|---|---|"]
    for k in REPORT_FIELDS:
        v = rep[k]
        lines.append(f"| {k} | {v:.6f} |" if isinstance(v, float) else f"| {k} | {v} |")
    if args.points:
        if not args.frames:
            raise UsageError("--points needs --frames")
        table = io.read_points(_require(Path(args.points), "point table"))
        frames = io.read_frames(Path(args.frames))
        wanted = args.overlay_frames if args.overlay_frames else [0]
        lines += ["", "## Overlays", ""]
        for t in wanted:
            if not 0 <= t < frames.shape[0]:
                raise UsageError(f"overlay frame {t} outside [0, {frames.shape[0]})")
            name = f"{out.stem}_t{t:04d}.ppm"
            io.write_ppm(out.with_name(name), overlay(frames[t], table, t))
            lines.append(f"- frame {t}: {name}")
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out}")
    return 0


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellpoint", description="Point-based cell tracking toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic annotated sequence")
    s.add_argument("--config", help="JSON with synthetic-sequence settings")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("track", help="track first-frame queries through a sequence")
    s.add_argument("--frames", required=True)
    s.add_argument("--queries", required=True, help="point table; visible slot-0 points of frame 0 are used")
    s.add_argument("--operator", choices=("deterministic", "learned"), default="deterministic")
    s.add_argument("--weights", help="CAPW checkpoint for the learned operator")
    s.add_argument("--lwin", type=int, default=100)
    s.add_argument("--M", type=int, default=4)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--dim", type=int, default=128, help="feature width of the deterministic pipeline")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score a result against a reference")
    s.add_argument("--ref", required=True)
    s.add_argument("--res", required=True)
    s.add_argument("--weights-aogm", dest="weights_aogm")
    s.add_argument("--radius", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("train", help="train the learned operator")
    s.add_argument("--data", nargs="+", required=True)
    s.add_argument("--config", help="JSON training job")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("report", help="render an evaluation report")
    s.add_argument("--eval", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--points")
    s.add_argument("--frames")
    s.add_argument("--overlay-frames", dest="overlay_frames", type=int, nargs="*")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, JobError, CheckpointError, io.FormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
