"""Command-line front end: ``segment``, ``eval`` and ``bench``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 integrity failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .energy import SIZE_MODES, EnergyParams, IntegrityError
from .engine import ConfigurationError, RunTrace, SegmentConfig
from .grid import DimensionError, Image, InitializationError, LabelMap, MappingError, build_pyramid, load_image
from .metrics import GroundTruth, boundary_map, boundary_recall, roi_precision_f1, under_segmentation_error
from .netpbm import FormatError, read_netpbm, write_netpbm
from .parallel import run_parallel_engine, run_parallel_rapid
from .predict import LinearModel, ModelFormatError, PredictionMap

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INTEGRITY = 4

ALGORITHMS = ("ctftps", "multiscale", "rapid")
SCHEMA_PATH = Path(__file__).with_name("report.schema.json")


@dataclass
class RunConfig:
    algorithm: str = "rapid"
    m: int = 256
    levels: int = 2
    ratio: int = 2
    final_grain: int = 1
    chain: Optional[list] = None
    lambda_pos: float = 0.1
    lambda_b: float = 0.01
    size_mode: Optional[str] = None
    l: float = 0.25
    u: float = 1.5
    workers: int = 1
    model: Optional[str] = None
    check_integrity: bool = False
    deterministic: bool = False
    out: Optional[str] = None
    inputs: list = field(default_factory=list)

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigurationError(f"{name}: {msg}")

        if self.algorithm not in ALGORITHMS:
            bad("algo", f"must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.m < 1:
            bad("sp", f"must be >= 1, got {self.m}")
        if self.levels < 1:
            bad("levels", f"must be >= 1, got {self.levels}")
        if self.ratio < 1:
            bad("ratio", f"must be >= 1, got {self.ratio}")
        if self.final_grain not in (1, 4):
            bad("grain", f"must be 1 or 4, got {self.final_grain}")
        if self.lambda_pos < 0:
            bad("lambda-pos", f"must be >= 0, got {self.lambda_pos}")
        if self.lambda_b < 0:
            bad("lambda-b", f"must be >= 0, got {self.lambda_b}")
        if self.size_mode is not None and self.size_mode not in SIZE_MODES:
            bad("size-mode", f"must be one of {SIZE_MODES}, got {self.size_mode!r}")
        if not 0 < self.l < 1:
            bad("l", f"must lie in (0, 1), got {self.l}")
        if self.u <= 1:
            bad("u", f"must be > 1, got {self.u}")
        if self.workers < 1:
            bad("workers", f"must be >= 1, got {self.workers}")
        if self.chain is not None and (not self.chain or any(b < 1 for b in self.chain)):
            bad("chain", f"block sizes must be positive, got {self.chain}")
        if self.algorithm == "rapid" and self.levels >= 2 and not self.model:
            bad("model", "rapid with 2 or more levels needs a linear model file")

    @property
    def effective_workers(self) -> int:
        return 1 if self.deterministic else self.workers

    @property
    def effective_size_mode(self) -> str:
        if self.algorithm == "rapid":
            return "merge"
        return self.size_mode or "hard-quarter"

    def segment_config(self) -> SegmentConfig:
        params = EnergyParams(
            lambda_pos=self.lambda_pos, lambda_b=self.lambda_b,
            size_mode=self.effective_size_mode, l=self.l, u=self.u,
        )
        return SegmentConfig(
            m=self.m, params=params, final_grain=self.final_grain, chain=self.chain,
            check_integrity=self.check_integrity,
        )

    def echo(self) -> dict:
        d = dataclasses.asdict(self)
        d["workers"] = self.effective_workers
        d["size_mode"] = self.effective_size_mode
        return d


@dataclass
class SegmentResult:
    labels: LabelMap
    prediction: Optional[PredictionMap]
    trace: RunTrace
    wall_ms: float


def segment_image(img: Image, cfg: RunConfig) -> SegmentResult:
    cfg.validate()
    levels = 1 if cfg.algorithm == "ctftps" else cfg.levels
    pyr = build_pyramid(img, cfg.ratio, levels)
    sc = cfg.segment_config()
    trace = RunTrace()
    t0 = time.perf_counter()
    pred = None
    if cfg.algorithm == "rapid":
        model = LinearModel.load(cfg.model) if cfg.model else None
        lm, pred = run_parallel_rapid(pyr, sc, model, cfg.effective_workers, trace=trace)
    else:
        lm = run_parallel_engine(cfg.algorithm, pyr, sc, cfg.effective_workers, trace=trace)
    return SegmentResult(lm, pred, trace, (time.perf_counter() - t0) * 1e3)


def overlay(img: Image, labels: np.ndarray) -> np.ndarray:
    """Source image as RGB with superpixel boundary pixels painted red."""
    rgb = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    out = rgb.copy()
    out[boundary_map(labels)] = (255, 0, 0)
    return out


def build_report(cfg: RunConfig, res: SegmentResult) -> dict:
    stages = [
        {
            "level": s.level, "block_size": s.b, "seeded": s.seeded, "popped": s.popped,
            "accepted": s.accepted, "merges": s.merges, "gate_rejects": s.gate_rejects,
            "merge_rejects": s.merge_rejects, "deferred": s.deferred, "sweeps": s.sweeps,
            "ceiling_hit": s.ceiling_hit, "wall_ms": s.wall_ms,
        }
        for s in res.trace.stages
    ]
    report = {
        "config": cfg.echo(),
        "wall_ms": {"total": res.wall_ms, **res.trace.phases_ms},
        "stages": stages,
        "schedule": res.trace.schedule,
        "final_m": int(np.unique(res.labels.labels).size),
        "width": res.labels.width,
        "height": res.labels.height,
    }
    if res.prediction is not None:
        report["roi_superpixels"] = int((res.prediction.y == 1).sum())
        report["boundary_superpixels"] = int(res.prediction.flags.sum())
    return report


def _env_workers() -> int:
    raw = os.environ.get("RAPID_WORKERS")
    if raw is None:
        return 1
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"RAPID_WORKERS: {raw!r} is not an integer") from None


def _chain(text: Optional[str]) -> Optional[list]:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigurationError(f"chain: {text!r} is not a comma-separated list of integers") from None


def _config_from_args(args, algorithm=None) -> RunConfig:
    return RunConfig(
        algorithm=algorithm or args.algo, m=args.sp, levels=args.levels, ratio=args.ratio,
        final_grain=args.grain, chain=_chain(args.chain), lambda_pos=args.lambda_pos,
        lambda_b=args.lambda_b, size_mode=args.size_mode, l=args.l, u=args.u,
        workers=args.workers if args.workers is not None else _env_workers(),
        model=args.model, check_integrity=args.check_integrity,
        deterministic=args.deterministic, out=getattr(args, "out", None),
    )


def cmd_segment(args) -> int:
    cfg = _config_from_args(args)
    cfg.inputs = [args.image]
    cfg.validate()
    img = load_image(args.image)
    res = segment_image(img, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.labels.save(out / "labels.rlbl")
    write_netpbm(out / "overlay.ppm", overlay(img, res.labels.labels))
    if res.prediction is not None:
        res.prediction.save(out / "prediction.txt")
        roi = res.prediction.roi_mask(res.labels.labels).astype(np.uint8) * 255
        write_netpbm(out / "roi.pgm", roi)
    report = build_report(cfg, res)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    print(f"{res.labels.width}x{res.labels.height}  {report['final_m']} superpixels  "
          f"{res.wall_ms:.1f} ms  -> {out}")
    return EXIT_OK


def evaluate(labels: np.ndarray, gt: GroundTruth, eps_list=(2,), prediction=None) -> dict:
    if labels.shape != gt.shape:
        raise DimensionError(f"shape mismatch: labels {labels.shape} vs ground truth {gt.shape}")
    result = {}
    if not gt.is_mask:
        result["ue"] = under_segmentation_error(labels, gt.labels)
        result["ue_classic"] = under_segmentation_error(labels, gt.labels, classic=True)
        result["br"] = {str(e): boundary_recall(labels, gt.labels, e) for e in eps_list}
    if prediction is not None:
        mask = gt.labels > 0 if gt.is_mask else None
        if mask is not None:
            det = roi_precision_f1(prediction.roi_mask(labels), mask)
            result.update(precision=det.precision, recall=det.recall, f1=det.f1)
    return result


def cmd_eval(args) -> int:
    lm = LabelMap.load(args.labels)
    gt = GroundTruth.from_array(read_netpbm(args.gt)[..., 0], args.gt_kind)
    pred = PredictionMap.load(args.prediction, lm.m) if args.prediction else None
    if gt.is_mask and pred is None:
        raise ConfigurationError("prediction: a mask ground truth needs --prediction")
    result = evaluate(lm.labels, gt, args.eps or [2], pred)
    if args.ue_classic and "ue" in result:
        result["ue"] = result["ue_classic"]
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def bench_rows(fixtures: list, cfgs: list, repeats: int = 3) -> list:
    """Mean wall time per (fixture, algorithm, grain, workers); the first
    repetition is discarded as warmup when ``repeats > 1``."""
    rows = []
    for path in fixtures:
        img = load_image(path)
        for cfg in cfgs:
            times, popped = [], 0
            for _ in range(repeats):
                res = segment_image(img, cfg)
                times.append(res.wall_ms / 1e3)
                popped = res.trace.popped()
            kept = times[1:] if repeats > 1 else times
            mean = statistics.fmean(kept)
            rows.append({
                "fixture": str(path), "algorithm": cfg.algorithm, "grain": cfg.final_grain,
                "workers": cfg.effective_workers, "repeats": repeats, "samples": len(kept),
                "mean_s": mean, "mpix_s": img.width * img.height / 1e6 / mean, "popped": popped,
            })
    for row in rows:
        base = [r for r in rows if r["fixture"] == row["fixture"] and r["algorithm"] == row["algorithm"]
                and r["grain"] == row["grain"] and r["workers"] == 1]
        row["speedup"] = base[0]["mean_s"] / row["mean_s"] if base else None
        ms = [r for r in rows if r["fixture"] == row["fixture"] and r["algorithm"] == "multiscale"
              and r["grain"] == row["grain"] and r["workers"] == row["workers"]]
        row["popped_vs_multiscale"] = row["popped"] / ms[0]["popped"] if ms and ms[0]["popped"] else None
    return rows


def format_rows(rows: list) -> str:
    head = f"{'fixture':<28} {'algo':<10} {'grain':>5} {'workers':>7} {'mean_s':>9} {'MPix/s':>8} " \
           f"{'popped':>10} {'speedup':>8} {'pop/ms':>7}"
    lines = [head]
    for r in rows:
        sp = f"{r['speedup']:.2f}" if r["speedup"] is not None else "-"
        pr = f"{r['popped_vs_multiscale']:.3f}" if r["popped_vs_multiscale"] is not None else "-"
        lines.append(
            f"{Path(r['fixture']).name[:28]:<28} {r['algorithm']:<10} {r['grain']:>5} {r['workers']:>7} "
            f"{r['mean_s']:>9.3f} {r['mpix_s']:>8.2f} {r['popped']:>10} {sp:>8} {pr:>7}"
        )
    if rows and rows[0]["samples"] == 1:
        lines.append("note: single sample per row, no warmup discarded")
    return "\n".join(lines)


def cmd_bench(args) -> int:
    workers = args.bench_workers or [args.workers if args.workers is not None else _env_workers()]
    cfgs = []
    for algo in args.algos:
        for grain in args.grains:
            for w in workers:
                ns = argparse.Namespace(**vars(args))
                ns.grain, ns.workers = grain, w
                cfg = _config_from_args(ns, algorithm=algo)
                cfg.validate()
                cfgs.append(cfg)
    rows = bench_rows(args.fixtures, cfgs, args.repeats)
    print(format_rows(rows))
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2))
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sp", type=int, default=256, help="number of superpixels M")
    p.add_argument("--levels", type=int, default=2, help="pyramid levels L")
    p.add_argument("--ratio", type=int, default=2, help="downsampling ratio C")
    p.add_argument("--grain", type=int, default=1, choices=(1, 4), help="final block size")
    p.add_argument("--chain", default=None, help="block sizes per level, e.g. 4,2,1")
    p.add_argument("--lambda-pos", type=float, default=0.1)
    p.add_argument("--lambda-b", type=float, default=0.01)
    p.add_argument("--size-mode", default=None, choices=SIZE_MODES,
                   help="size constraint (rapid always merges)")
    p.add_argument("--l", type=float, default=0.25, help="merge trigger, fraction of InitSize")
    p.add_argument("--u", type=float, default=1.5, help="merge cap, fraction of target InitSize")
    p.add_argument("--workers", type=int, default=None, help="threads (default $RAPID_WORKERS or 1)")
    p.add_argument("--model", default=None, help="linear model file (rapid)")
    p.add_argument("--deterministic", action="store_true", help="force a single worker")
    p.add_argument("--check-integrity", action="store_true",
                   help="recompute statistics and connectivity after every stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rapidseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment one image into superpixels")
    p.add_argument("image", help="input PGM/PPM")
    p.add_argument("--algo", default="rapid", choices=ALGORITHMS)
    p.add_argument("--out", default="out", help="output directory")
    _add_run_flags(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("eval", help="score a label map against ground truth")
    p.add_argument("labels", help="RLBL label map")
    p.add_argument("gt", help="ground truth PGM (segment ids or 0/255 mask)")
    p.add_argument("--gt-kind", default="auto", choices=("auto", "segments", "mask"))
    p.add_argument("--prediction", default=None, help="prediction text for ROI scores")
    p.add_argument("--eps", type=int, action="append", help="boundary tolerance (repeatable)")
    p.add_argument("--ue-classic", action="store_true", help="report the uncorrected UE as 'ue'")
    p.add_argument("--out", default=None, help="also write the JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time algorithms on fixtures")
    p.add_argument("fixtures", nargs="+")
    p.add_argument("--algos", nargs="+", default=["multiscale", "rapid"], choices=ALGORITHMS)
    p.add_argument("--grains", nargs="+", type=int, default=[1], choices=(1, 4))
    p.add_argument("--bench-workers", nargs="+", type=int, default=None)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--json", default=None, help="write rows as JSON")
    _add_run_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IntegrityError as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (FormatError, ModelFormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, DimensionError, InitializationError, MappingError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
