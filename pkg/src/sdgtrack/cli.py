"""Command-line entry point: generate, track, eval, ablate."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .core import ConfigError, DataError, load_config
from . import evalkit, observer, pipeline, synthgen

log = logging.getLogger("sdgtrack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sdgtrack", description="Sparse-detection guided tracking of small aerial targets.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic sequence")
    g.add_argument("--spec", required=True, type=Path, help="scenario file (key=value)")
    g.add_argument("--out", required=True, type=Path, help="output sequence directory")

    t = sub.add_parser("track", help="run the tracker over a sequence directory")
    t.add_argument("--seq", required=True, type=Path)
    t.add_argument("--config", required=True, type=Path)
    src = t.add_mutually_exclusive_group()
    src.add_argument("--detections", type=Path, help="detections CSV (frame,score,cx,cy,w,h)")
    src.add_argument("--oracle", action="store_true", help="simulate the detector from groundtruth.csv")
    t.add_argument("--out", required=True, type=Path, help="track CSV")
    t.add_argument("--overlay", type=Path, help="directory for annotated PPM frames")

    e = sub.add_parser("eval", help="score a track against ground truth")
    e.add_argument("--track", required=True, type=Path)
    e.add_argument("--gt", required=True, type=Path)
    e.add_argument("--count-hold", action="store_true", help="score HOLD boxes as predictions")
    e.add_argument("--out", required=True, type=Path, help="key=value report; a .curve.dat file is written beside it")

    a = sub.add_parser("ablate", help="compare ZOH, Follower-only and Full on a scenario suite")
    a.add_argument("--suite", required=True, type=Path, help="directory of *.scenario files")
    a.add_argument("--config", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--timing", action="store_true", help="include wall-clock update rates (not reproducible)")
    return p


def _need_file(path: Path):
    if not path.is_file():
        raise DataError("no such file", path)


def _need_dir(path: Path):
    if not path.is_dir():
        raise DataError("no such directory", path)


def cmd_generate(args):
    _need_file(args.spec)
    spec = synthgen.load_scenario(args.spec)
    frames, gt = synthgen.generate(spec)
    synthgen.save_sequence(frames, gt, args.out)
    print(f"wrote {len(frames)} frames to {args.out}")


def _load_sequence(seq: Path):
    _need_dir(seq)
    gt_path = seq / synthgen.GT_FILE
    if not gt_path.is_file():
        raise DataError(f"missing {synthgen.GT_FILE}", seq)
    gt = synthgen.load_groundtruth(gt_path)
    paths = synthgen.frame_paths(seq)
    if [p.name for p in paths] != [synthgen.frame_name(i) for i in range(len(gt))]:
        raise DataError(f"{len(paths)} frame files do not match {len(gt)} ground-truth rows", seq)
    return gt


def cmd_track(args):
    gt = _load_sequence(args.seq)
    _need_file(args.config)
    if args.detections is not None:
        _need_file(args.detections)
    cfg = load_config(args.config)
    frames = synthgen.iter_sequence_frames(args.seq)
    if args.oracle:
        first = synthgen.read_ppm(synthgen.frame_paths(args.seq)[0])
        params = observer.OracleDetectorParams.from_config(cfg.observer, cfg.oracle)
        source = observer.OracleDetector(gt, params, (first.shape[1], first.shape[0]))
    elif args.detections is not None:
        source = observer.ListDetections(observer.load_detections(args.detections), cfg.observer.latency)
    else:
        source = observer.NoDetections()

    overlay = args.overlay
    kept = []
    if overlay is not None:
        overlay.mkdir(parents=True, exist_ok=True)
        frames = _tee(frames, kept)
    records, timing = pipeline.run_sequence(frames, source, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.save_track(records, args.out)
    for rec, px in zip(records, kept):
        synthgen.write_ppm(overlay / synthgen.frame_name(rec.frame_index), draw_overlay(px, rec))
    sys.stderr.write(timing.report())
    print(f"wrote {len(records)} records to {args.out}")


def _tee(frames, kept):
    for f in frames:
        kept.append(f.pixels)
        yield f


def cmd_eval(args):
    _need_file(args.track)
    _need_file(args.gt)
    records = pipeline.load_track(args.track)
    gt = synthgen.load_groundtruth(args.gt)
    try:
        result = evalkit.evaluate(records, gt, count_hold=args.count_hold)
    except ValueError as exc:
        raise DataError(str(exc), args.track) from None
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(result.report())
    args.out.with_suffix(".curve.dat").write_text(result.success_curve())
    print(f"precision={result.precision:.4f} auc={result.auc:.4f} frames={result.frames_evaluated}")


def cmd_ablate(args):
    suite = evalkit.load_suite(args.suite)
    _need_file(args.config)
    cfg = load_config(args.config)
    report = evalkit.run_ablation(suite, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.csv").write_text(report.to_csv(timing=args.timing))
    (args.out / "ablation.txt").write_text(report.to_text(timing=args.timing))
    print(report.to_text(timing=True), end="")
    print(f"retention (Full / Dense-oracle precision): {report.retention():.4f}")


COMMANDS = {"generate": cmd_generate, "track": cmd_track, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (DataError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    return 0


# ---------------------------------------------------------------------------
# overlay drawing

_SOURCE_COLORS = {
    "DETECTION": (0, 255, 0), "FLOW": (255, 255, 0), "RECOVERY": (255, 0, 255),
    "HOLD": (255, 128, 0), "NONE": (255, 0, 0),
}

# 3x5 glyphs, rows top to bottom, bit 2 = left column
_FONT = {
    "A": (2, 5, 7, 5, 5), "C": (3, 4, 4, 4, 3), "D": (6, 5, 5, 5, 6), "E": (7, 4, 6, 4, 7),
    "F": (7, 4, 6, 4, 4), "G": (3, 4, 5, 5, 3), "H": (5, 5, 7, 5, 5), "I": (7, 2, 2, 2, 7),
    "K": (5, 5, 6, 5, 5), "L": (4, 4, 4, 4, 7), "N": (6, 5, 5, 5, 5), "O": (2, 5, 5, 5, 2),
    "R": (6, 5, 6, 5, 5), "S": (3, 4, 2, 1, 6), "T": (7, 2, 2, 2, 2), "U": (5, 5, 5, 5, 7),
    "V": (5, 5, 5, 5, 2), "W": (5, 5, 7, 7, 5), "Y": (5, 5, 2, 2, 2), "Z": (7, 1, 2, 4, 7),
    "/": (1, 1, 2, 4, 4), " ": (0, 0, 0, 0, 0),
}


def draw_text(img, x, y, text, color, scale=2):
    h, w, _ = img.shape
    for ch in text.upper():
        rows = _FONT.get(ch, _FONT[" "])
        for r, bits in enumerate(rows):
            for c in range(3):
                if bits & (4 >> c):
                    y0, x0 = y + r * scale, x + c * scale
                    img[max(0, y0):max(0, min(h, y0 + scale)), max(0, x0):max(0, min(w, x0 + scale))] = color
        x += 4 * scale


def draw_box(img, b, color):
    h, w, _ = img.shape
    c0, r0, c1, r1 = b.pixel_span(w, h)
    img[r0, c0:c1] = color
    img[r1 - 1, c0:c1] = color
    img[r0:r1, c0] = color
    img[r0:r1, c1 - 1] = color


def draw_overlay(pixels: np.ndarray, rec) -> np.ndarray:
    img = pixels.copy()
    color = _SOURCE_COLORS[rec.source]
    if rec.bbox is not None:
        draw_box(img, rec.bbox, color)
    draw_text(img, 2, 2, f"{rec.mode.value}/{rec.source}", color)
    return img


if __name__ == "__main__":
    sys.exit(main())
