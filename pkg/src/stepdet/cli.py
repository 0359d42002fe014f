"""Command-line entry point: simulate, detect, train, link, eval and report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io as sio
from .config import ConfigError, ExperimentConfig, load_config, parse_override
from .engine import n_clips
from .geometry import Tubelet
from .metrics import (
    TubeDetection,
    best_gt_overlaps,
    frame_map,
    iou_histogram,
    video_map,
    windowed_miut,
)
from .model import LinearHead, LinearModel, OracleModel, load_heads, save_heads
from .pipeline import (
    detect_scenes,
    detection_records,
    frame_detections,
    frame_ground_truth,
    gt_tube_detections,
    initial_boxes,
    link_video,
    make_scenes,
    records_to_clip_outputs,
)
from .proposals import replicate_to_cuboids
from .simulator import feature_width

log = logging.getLogger("stepdet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set steps.k=8 (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("-o", "--out", help="output directory (default: config, then $STEPDET_OUTPUT_DIR)")
    p.add_argument("-j", "--jobs", type=int, help="worker processes for per-video work")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stepdet", description="Progressive spatio-temporal action detection on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("simulate", help="generate seeded synthetic scenes")
    _common(p)

    p = sub.add_parser("detect", help="run progressive detection over every clip")
    _common(p)
    p.add_argument("--scenes", help="scene file (default: OUT/scenes.json)")
    p.add_argument("--checkpoint", help="head checkpoint for model.kind=linear")

    p = sub.add_parser("train", help="jointly train linear heads on the scenes")
    _common(p)
    p.add_argument("--scenes", help="scene file (default: OUT/scenes.json)")

    p = sub.add_parser("link", help="link clip detections into action tubes")
    _common(p)
    p.add_argument("--scenes", help="scene file (default: OUT/scenes.json)")
    p.add_argument("--detections", help="detections file (default: OUT/detections.jsonl)")
    p.add_argument("--step", type=int, help="step whose outputs are linked (default: last)")

    p = sub.add_parser("eval", help="frame/video mAP, IoU histograms and MIUT")
    _common(p)
    p.add_argument("--scenes", help="scene file (default: OUT/scenes.json)")
    p.add_argument("--detections", help="detections file (default: OUT/detections.jsonl)")
    p.add_argument("--tubes", help="tubes file (default: OUT/tubes.jsonl if present, else link on the fly)")

    p = sub.add_parser("report", help="render CSV outputs as SVG charts")
    _common(p)
    p.add_argument("inputs", nargs="*", help="CSV files (default: known CSVs in OUT)")
    return parser


# ---------------------------------------------------------------------------


def _config(args) -> ExperimentConfig:
    overrides = dict(parse_override(t) for t in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    return load_config(args.config, overrides)


def _input(path, default: Path, what: str) -> Path:
    p = Path(path) if path else default
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _models(cfg: ExperimentConfig, checkpoint: str | None):
    n_classes = cfg.scenes.n_classes
    s_max = cfg.steps.s_max
    if cfg.model.kind == "oracle":
        return [OracleModel(n_classes, cfg.model.noise, cfg.model.sharpness)] * s_max
    path = checkpoint or cfg.model.checkpoint
    if path:
        heads = load_heads(_input(path, Path(path), "checkpoint"))
    else:
        log.warning("no checkpoint given; using untrained (zero) heads")
        heads = [LinearHead.zeros(feature_width(n_classes), n_classes) for _ in range(s_max)]
    if len(heads) != s_max:
        raise ValueError(f"checkpoint has {len(heads)} heads but steps.s_max is {s_max}")
    return [LinearModel(h, cfg.model.feature_noise) for h in heads]


def cmd_simulate(cfg: ExperimentConfig, args, out: Path) -> list[Path]:
    spec = cfg.scenes.scene_spec(cfg.seed)
    scenes = make_scenes(spec, cfg.scenes.n_scenes, cfg.seed)
    path = out / "scenes.json"
    sio.save_scenes(path, scenes, spec)
    log.info("wrote %d scenes to %s", len(scenes), path)
    return [path]


def cmd_detect(cfg: ExperimentConfig, args, out: Path) -> list[Path]:
    scenes = sio.load_scenes(_input(args.scenes, out / "scenes.json", "scene file"))
    models = _models(cfg, args.checkpoint)
    boxes = initial_boxes(cfg.proposals.layout, scenes[0].width, scenes[0].height) if scenes else []
    results = detect_scenes(scenes, cfg.steps.step_config(), models, boxes, cfg.seed, cfg.jobs)
    records = []
    for scene, res in zip(scenes, results):
        records += detection_records(scene, res)
    path = out / "detections.jsonl"
    sio.save_detections(path, records)
    log.info("wrote %d detection records to %s", len(records), path)
    return [path]


def cmd_train(cfg: ExperimentConfig, args, out: Path) -> list[Path]:
    from .training import report_csv, train

    scenes = sio.load_scenes(_input(args.scenes, out / "scenes.json", "scene file"))
    boxes = initial_boxes(cfg.proposals.layout, scenes[0].width, scenes[0].height)
    t = cfg.training
    heads, history = train(
        scenes, cfg.steps.step_config(), boxes, t.iterations, t.lr, t.batch_size, cfg.seed, cfg.model.feature_noise
    )
    ckpt, log_path = out / "heads.json", out / "train_log.csv"
    save_heads(ckpt, heads)
    sio.atomic_write_text(log_path, report_csv(history))
    log.info("trained %d iterations; final batch loss %.4f", t.iterations, history[-1].total)
    return [ckpt, log_path]


def _tubes_for(cfg, scenes, records, step) -> list[dict]:
    out = []
    for scene in scenes:
        clips = records_to_clip_outputs(records, scene.name, step, cfg.steps.k)
        for tube in link_video(scene, clips, cfg.linking.link_threshold, cfg.linking.beta, cfg.linking.nms_threshold):
            start, boxes = tube.boxes()
            out.append(sio.tube_record(scene.name, tube.label, tube.score, start, boxes))
    return out


def _step(cfg, records, requested: int | None) -> int:
    steps = sorted({r.step for r in records})
    if not steps:
        raise ValueError("detections file holds no records")
    step = steps[-1] if requested is None else requested
    if step not in steps:
        raise ValueError(f"no detections for step {step}; available steps {steps}")
    return step


def cmd_link(cfg: ExperimentConfig, args, out: Path) -> list[Path]:
    scenes = sio.load_scenes(_input(args.scenes, out / "scenes.json", "scene file"))
    records = sio.load_detections(_input(args.detections, out / "detections.jsonl", "detections file"))
    tubes = _tubes_for(cfg, scenes, records, _step(cfg, records, args.step))
    path = out / "tubes.jsonl"
    sio.save_tubes(path, tubes)
    log.info("wrote %d tubes to %s", len(tubes), path)
    return [path]


def _step_inputs(cfg, scene, records, step) -> list[tuple[tuple[int, int], list[Tubelet]]]:
    """Proposals fed to ``step`` per clip: initial cuboids, else the previous step's outputs."""
    k = cfg.steps.k
    if step == 1:
        boxes = initial_boxes(cfg.proposals.layout, scene.width, scene.height)
        return [
            ((c * k, (c + 1) * k), replicate_to_cuboids(boxes, (c * k, (c + 1) * k)))
            for c in range(n_clips(scene.n_frames, k))
        ]
    return [(c.frames, [o.tubelet for o in c.outputs]) for c in records_to_clip_outputs(records, scene.name, step - 1, k)]


def cmd_eval(cfg: ExperimentConfig, args, out: Path) -> list[Path]:
    scenes = sio.load_scenes(_input(args.scenes, out / "scenes.json", "scene file"))
    records = sio.load_detections(_input(args.detections, out / "detections.jsonl", "detections file"))
    ev, k = cfg.evaluation, cfg.steps.k
    steps = sorted({r.step for r in records})
    if not steps:
        raise ValueError("detections file holds no records")
    gts = []
    for scene in scenes:
        gts += frame_ground_truth(scene, n_clips(scene.n_frames, k) * k)

    frame_rows, summary = [], {"frame_map": {}, "video_map": {}, "median_input_iou": {}, "mean_input_iou": {}}
    step_overlaps = []
    for s in steps:
        dets = []
        for scene in scenes:
            dets += frame_detections(scene.name, records_to_clip_outputs(records, scene.name, s, k), cfg.linking.nms_threshold)
        res = frame_map(dets, gts, ev.iou_threshold)
        frame_rows += [(s, c, ap) for c, ap in sorted(res.per_class.items())]
        summary["frame_map"][str(s)] = res.mean
        ovs = [np.zeros(0)]
        for scene in scenes:
            for frames, props in _step_inputs(cfg, scene, records, s):
                ovs.append(best_gt_overlaps(props, scene.tubes, frames))
        ov = np.concatenate(ovs)
        step_overlaps.append(ov)
        summary["median_input_iou"][str(s)] = float(np.median(ov)) if ov.size else 0.0
        summary["mean_input_iou"][str(s)] = float(ov.mean()) if ov.size else 0.0

    tubes_path = Path(args.tubes) if args.tubes else out / "tubes.jsonl"
    if args.tubes or tubes_path.is_file():
        tube_dicts = sio.read_jsonl(_input(args.tubes, tubes_path, "tubes file"))
    else:
        tube_dicts = _tubes_for(cfg, scenes, records, steps[-1])
    dets = [TubeDetection(*sio.parse_tube(d)) for d in tube_dicts if d["frames"]]
    gt_tubes = []
    for scene in scenes:
        gt_tubes += gt_tube_detections(scene, n_clips(scene.n_frames, k) * k)
    video_rows = []
    for thr in ev.video_thresholds:
        res = video_map(dets, gt_tubes, thr)
        video_rows += [(thr, c, ap) for c, ap in sorted(res.per_class.items())]
        summary["video_map"][f"{thr:g}"] = res.mean

    edges, counts = iou_histogram(step_overlaps, ev.histogram_bin)
    hist_rows = [
        (s, float(edges[b]), float(edges[b + 1]), int(counts[i, b]))
        for i, s in enumerate(steps)
        for b in range(len(edges) - 1)
    ]

    lengths = sorted({L for L in (k, 3 * k, 5 * k)})
    miut_rows = []
    for scene in scenes:
        for j, tube in enumerate(scene.tubes):
            for L in lengths:
                if len(tube) >= L:
                    miut_rows.append((scene.name, j, tube.label, L, windowed_miut(tube.boxes, L)))
    summary["mean_miut"] = {
        str(L): float(np.mean([r[4] for r in miut_rows if r[3] == L])) for L in lengths if any(r[3] == L for r in miut_rows)
    }

    paths = {
        "eval_frame.csv": (("step", "class", "ap"), frame_rows),
        "eval_video.csv": (("threshold", "class", "ap"), video_rows),
        "iou_histogram.csv": (("step", "bin_lo", "bin_hi", "count"), hist_rows),
        "miut.csv": (("video", "tube", "class", "length", "miut"), miut_rows),
    }
    written = []
    for name, (header, rows) in paths.items():
        sio.write_csv(out / name, header, rows)
        written.append(out / name)
    sio.write_json(out / "eval_summary.json", summary)
    written.append(out / "eval_summary.json")
    for s, m in summary["frame_map"].items():
        print(f"frame-mAP@{ev.iou_threshold:g} step {s}: {m:.4f}")
    for t, m in summary["video_map"].items():
        print(f"video-mAP@{t}: {m:.4f}")
    return written


def _render(path: Path) -> Path:
    header, rows = sio.read_csv(path)
    svg = path.with_suffix(".svg")
    if header[:1] == ["iteration"]:
        x = [int(r[0]) for r in rows]
        series = {h: [float(r[i]) for r in rows] for i, h in enumerate(header) if h.startswith("total")}
        series.update({h: [float(r[i]) for r in rows] for i, h in enumerate(header) if h.startswith("cls_")})
        sio.line_chart_svg(svg, x, series, "iteration", "loss", "training loss")
    elif header == ["step", "bin_lo", "bin_hi", "count"]:
        by_step: dict[str, list[float]] = {}
        edges: list[float] = []
        for r in rows:
            by_step.setdefault(f"step {r[0]}", []).append(float(r[3]))
            if r[0] == rows[0][0]:
                edges.append(float(r[1]))
        edges.append(float(rows[len(edges) - 1][2]) if rows else 1.0)
        sio.bar_chart_svg(svg, edges, by_step, "IoU with ground truth", "proposals", "input IoU per step")
    elif header == ["step", "class", "ap"]:
        by_class: dict[str, list[float]] = {}
        steps = sorted({int(r[0]) for r in rows})
        for r in rows:
            by_class.setdefault(f"class {r[1]}", []).append(float(r[2]))
        sio.line_chart_svg(svg, steps, by_class, "step", "AP", "frame AP per step")
    elif header == ["threshold", "class", "ap"]:
        by_class = {}
        thresholds = sorted({float(r[0]) for r in rows})
        for r in rows:
            by_class.setdefault(f"class {r[1]}", []).append(float(r[2]))
        sio.line_chart_svg(svg, thresholds, by_class, "tube IoU threshold", "AP", "video AP")
    else:
        raise ValueError(f"{path}: unrecognized CSV layout {header}")
    return svg


def cmd_report(cfg: ExperimentConfig, args, out: Path) -> list[Path]:
    if args.inputs:
        inputs = [_input(p, Path(p), "CSV file") for p in args.inputs]
    else:
        names = ("train_log.csv", "iou_histogram.csv", "eval_frame.csv", "eval_video.csv")
        inputs = [out / n for n in names if (out / n).is_file()]
        if not inputs:
            raise FileNotFoundError(f"no CSV outputs to report in {out}")
    written = [_render(p) for p in inputs]
    for p in written:
        log.info("wrote %s", p)
    return written


COMMANDS = {
    "simulate": cmd_simulate,
    "detect": cmd_detect,
    "train": cmd_train,
    "link": cmd_link,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"stepdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
    except ConfigError as exc:
        print(f"stepdet: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = cfg.resolved_output_dir()
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](cfg, args, out)
        sio.write_manifest(out / f"manifest_{args.command}.json", args.command, cfg.hashable(), cfg.seed, written)
    except (OSError, ValueError) as exc:
        print(f"stepdet {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
