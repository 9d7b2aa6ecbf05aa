"""Command-line surface: gen-data, train, refine, eval, report.

Every command resolves one JSON run config (profile preset, optional
config file, explicit flags — in that order), echoes the resolved config
next to its outputs, and derives all randomness from the single seed via
named substreams. Exit codes: 0 success, 1 usage/config error, 2 data
error, 3 numeric failure. Relative output paths are placed under
$BOXREFINE_OUT_ROOT when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .checkpoint import load_checkpoint
from .errors import BoxRefineError, ConfigError, DataError, NumericError
from .evaluate import SceneEval, build_report, compare_reports
from .profiles import build_bundle, resolve_config
from .refine import refine_scene
from .rng import substream
from .scene import Detection, sample_scene, simulate_detections
from .training import train_loop
from .fileio import atomic_write_text, dumps_canonical


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are exit-code-1 config errors
        raise ConfigError(message)


def _out_path(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get("BOXREFINE_OUT_ROOT", "")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_config_arg(args) -> dict:
    overrides = {}
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
    cfg = resolve_config(getattr(args, "profile", "desk"), overrides)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _echo_config(out_dir: Path, name: str, cfg: dict) -> None:
    atomic_write_text(out_dir / name, dumps_canonical(cfg) + "\n")


def _scene_index(manifest: dict) -> dict[str, dict]:
    index = {}
    for split, entries in manifest["splits"].items():
        for entry in entries:
            index[entry["id"]] = {**entry, "split": split}
    return index


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config_arg(args)
    if args.train_scenes is not None:
        cfg["gen"]["train_scenes"] = args.train_scenes
    if args.val_scenes is not None:
        cfg["gen"]["val_scenes"] = args.val_scenes
    bundle = build_bundle(cfg)
    out_dir = _out_path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force to overwrite)")
    (out_dir / "scenes").mkdir(parents=True, exist_ok=True)

    splits: dict[str, list[dict]] = {}
    warnings_total = 0
    for split, count in (("train", bundle.gen["train_scenes"]), ("val", bundle.gen["val_scenes"])):
        entries = []
        for i in range(int(count)):
            sid = f"{split}_{i:06d}"
            seed = int(substream(bundle.seed, f"scene-seed-{split}", i).integers(2**62))
            scene = sample_scene(bundle.spec, seed)
            warnings_total += len(scene.warnings)
            rel = f"scenes/{sid}.sbin"
            fileio.write_scene(out_dir / rel, scene, sid, bundle.spec)
            entries.append({"id": sid, "file": rel, "seed": seed})
        splits[split] = entries

    det_records = []
    for i, entry in enumerate(splits["val"]):
        scene, sid = fileio.read_scene(out_dir / entry["file"])
        det_seed = int(substream(bundle.seed, "det-seed", i).integers(2**62))
        dets = simulate_detections(
            scene,
            bundle.perturbation,
            bundle.detector["sigma_det"],
            bundle.detector["fp_rate"],
            bundle.detector["fn_rate"],
            seed=det_seed,
            spec=bundle.spec,
        )
        det_records.extend(fileio.detection_record(sid, d) for d in dets)

    fileio.write_manifest(out_dir / "manifest.json", bundle.seed, bundle.spec, splits)
    fileio.write_detections(out_dir / "detections_val.json", det_records)
    _echo_config(out_dir, "gen_config.json", cfg)
    print(
        f"wrote {len(splits['train'])} train + {len(splits['val'])} val scenes, "
        f"{len(det_records)} simulated detections to {out_dir}"
        + (f" ({warnings_total} placement warnings)" if warnings_total else "")
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config_arg(args)
    if args.steps is not None:
        cfg["train"]["total_steps"] = args.steps
    if args.batch_size is not None:
        cfg["train"]["batch_size"] = args.batch_size
    bundle = build_bundle(cfg)
    data_dir = Path(args.data)
    out_dir = _out_path(args.out)
    manifest = fileio.read_manifest(data_dir / "manifest.json")
    entries = manifest["splits"].get("train", [])
    if not entries:
        raise DataError(f"{data_dir}: manifest has no train split")
    missing = [e["id"] for e in entries if not (data_dir / e["file"]).exists()]
    if missing:
        raise DataError(f"{data_dir}: missing scene files for: {', '.join(missing[:8])}" + (" ..." if len(missing) > 8 else ""))
    scenes = [fileio.read_scene(data_dir / e["file"])[0] for e in entries]
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(out_dir, "run_config.json", cfg)
    _, rows = train_loop(bundle.train, bundle.model, scenes, out_dir, resume=args.resume, progress=args.progress)
    final_loss = rows[-1].loss if rows else float("nan")
    print(f"trained {bundle.train.total_steps} steps on {len(scenes)} scenes; final logged loss {final_loss:.5f}")
    print(f"checkpoint: {out_dir / 'checkpoint_final.ckpt'}")
    return 0


# ---------------------------------------------------------------------------
# refine
# ---------------------------------------------------------------------------


def _parse_mean_size(text: str):
    if text.lower() == "none":
        return None
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ConfigError("--mean-size expects 'w,l,h' or 'none'")
    return parts


def cmd_refine(args) -> int:
    cfg = _load_config_arg(args)
    r = cfg["refine"]
    if args.steps is not None:
        r["steps"] = args.steps
    if args.shape_weight is not None:
        r["shape_weight"] = args.shape_weight
    if args.context is not None:
        r["context"] = args.context
    if args.mean_size is not None:
        r["mean_size"] = _parse_mean_size(args.mean_size)
    if args.solver is not None:
        r["solver"] = args.solver
    if args.sigma_range is not None:
        lo, hi = (float(v) for v in args.sigma_range.split(","))
        r["sigma_lo"], r["sigma_hi"] = lo, hi
    if args.nms_threshold is not None:
        r["nms_threshold"] = args.nms_threshold
    if args.score_mode is not None:
        r["score_mode"] = args.score_mode
    bundle = build_bundle(cfg)

    weights, dconfig = load_checkpoint(Path(args.checkpoint))
    detections = fileio.read_detections(Path(args.detections))
    data_dir = Path(args.data)
    manifest = fileio.read_manifest(data_dir / "manifest.json")
    index = _scene_index(manifest)
    unknown = sorted({d["scene_id"] for d in detections} - set(index))
    if unknown:
        raise DataError(f"detections reference scenes missing from {data_dir}: {', '.join(unknown[:8])}")

    by_scene: dict[str, list[tuple[int, dict]]] = {}
    scene_order: list[str] = []
    for i, rec in enumerate(detections):
        sid = rec["scene_id"]
        if sid not in by_scene:
            by_scene[sid] = []
            scene_order.append(sid)
        by_scene[sid].append((i, rec))

    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.trace:
        (out_dir / "traces").mkdir(exist_ok=True)

    out_records = []
    n_failed = 0
    for s_idx, sid in enumerate(scene_order):
        scene, _ = fileio.read_scene(data_dir / index[sid]["file"])
        recs = by_scene[sid]
        dets = [(np.asarray(rec["box"], dtype=np.float64), float(rec["confidence"])) for _, rec in recs]
        seed = int(substream(bundle.seed, "refine-scene", s_idx).integers(2**62))
        kept = refine_scene(
            weights, dconfig, scene.cloud.points, dets, bundle.refine, seed=seed, keep_traces=args.trace
        )
        for r_det in kept:
            _, src = recs[r_det.index]
            extra = {"refined": bool(r_det.refined), "failure_flag": bool(r_det.failed)}
            if args.trace and r_det.trace is not None:
                rel = f"traces/{sid}_det{r_det.index:04d}.csv"
                lines = ["step,sigma,x,y,z,w,l,h,theta"]
                for step_i, (sig, box) in enumerate(zip(r_det.trace.sigmas, r_det.trace.boxes)):
                    lines.append(f"{step_i},{sig:.8g}," + ",".join(f"{v:.8g}" for v in box))
                atomic_write_text(out_dir / rel, "\n".join(lines) + "\n")
                extra["trace_path"] = rel
            n_failed += int(r_det.failed)
            out_records.append(
                fileio.detection_record(
                    sid, Detection(box=r_det.box, confidence=r_det.confidence, cls=src.get("class", "car")), **extra
                )
            )

    fileio.write_detections(out_dir / "refined_detections.json", out_records)
    _echo_config(out_dir, "refine_config.json", cfg)
    print(
        f"refined {len(detections)} detections over {len(scene_order)} scenes -> "
        f"{len(out_records)} kept after NMS ({n_failed} failures passed through)"
    )
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_ranges(text: str):
    ranges = []
    for part in text.split(","):
        lo, hi = part.split("-")
        ranges.append([float(lo), float(hi)])
    return ranges


def _flatten(d: dict, prefix: str = "") -> list[tuple[str, object]]:
    rows = []
    for key in sorted(d):
        value = d[key]
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            rows.extend(_flatten(value, prefix=name + "."))
        elif isinstance(value, list):
            rows.append((name, " ".join(str(v) for v in value)))
        else:
            rows.append((name, value))
    return rows


def cmd_eval(args) -> int:
    cfg = _load_config_arg(args)
    if args.ranges is not None:
        cfg["eval"]["ranges"] = _parse_ranges(args.ranges)
    if args.iou_threshold is not None:
        cfg["eval"]["iou_threshold"] = args.iou_threshold
    bundle = build_bundle(cfg)

    detections = fileio.read_detections(Path(args.pred))
    data_dir = Path(args.data)
    manifest = fileio.read_manifest(data_dir / "manifest.json")
    entries = manifest["splits"].get(args.split)
    if entries is None:
        raise DataError(f"manifest has no split {args.split!r}")
    ids = {e["id"] for e in entries}
    unknown = sorted({d["scene_id"] for d in detections} - ids)
    if unknown:
        raise DataError(f"detections reference scenes outside split {args.split}: {', '.join(unknown[:8])}")

    by_scene: dict[str, list[dict]] = {e["id"]: [] for e in entries}
    for rec in detections:
        by_scene[rec["scene_id"]].append(rec)

    scene_evals = []
    for entry in entries:
        scene, _ = fileio.read_scene(data_dir / entry["file"])
        recs = by_scene[entry["id"]]
        preds = np.stack([np.asarray(r["box"], dtype=np.float64) for r in recs]) if recs else np.zeros((0, 7))
        confs = np.array([float(r["confidence"]) for r in recs])
        scene_evals.append(
            SceneEval(pred_boxes=preds, confidences=confs, gt_boxes=scene.gt_boxes, sensor_origin=scene.sensor_origin)
        )

    report = build_report(scene_evals, bundle.eval)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "metrics.json", dumps_canonical(report) + "\n")
    csv_lines = ["metric,value"] + [f"{k},{v}" for k, v in _flatten(report)]
    atomic_write_text(out_dir / "metrics.csv", "\n".join(csv_lines) + "\n")
    _echo_config(out_dir, "eval_config.json", cfg)
    ap3d = report["ap_3d"]["all"]
    print(f"evaluated {report['num_detections']} detections on {report['num_scenes']} scenes; 3D AP@{bundle.eval.iou_threshold} (all) = "
          + (f"{ap3d:.4f}" if ap3d is not None else "n/a"))
    print(f"metrics: {out_dir / 'metrics.json'}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}"


def _markdown_table(reports: list[dict], labels: list[str]) -> str:
    cfg = reports[0]["config"]
    range_keys = [f"{lo:g}-{hi:g}" for lo, hi in cfg["ranges"]] + ["all"]
    header = ["method"] + [f"BEV {k}" for k in range_keys] + [f"3D {k}" for k in range_keys] + ["ATE", "ASE", "AOE"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]

    def row(label, rep):
        cells = [label]
        cells += [_fmt(rep["ap_bev"].get(k)) for k in range_keys]
        cells += [_fmt(rep["ap_3d"].get(k)) for k in range_keys]
        tp = rep.get("tp_errors")
        cells += [_fmt(tp and tp.get("ate")), _fmt(tp and tp.get("ase")), _fmt(tp and tp.get("aoe"))]
        return "| " + " | ".join(cells) + " |"

    for label, rep in zip(labels, reports):
        lines.append(row(label, rep))
    if len(reports) == 2:
        delta = compare_reports(reports[0], reports[1])
        cells = ["delta (improvement +)"]
        cells += [_fmt(delta["ap_bev"].get(k)) for k in range_keys]
        cells += [_fmt(delta["ap_3d"].get(k)) for k in range_keys]
        tp = delta.get("tp_errors")
        cells += [_fmt(tp and tp.get("ate")), _fmt(tp and tp.get("ase")), _fmt(tp and tp.get("aoe"))]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.reports]
    reports = []
    for p in paths:
        try:
            reports.append(json.loads(p.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read report {p}: {exc}") from exc
    labels = args.labels.split(",") if args.labels else [p.parent.name or p.stem for p in paths]
    if len(labels) != len(reports):
        raise ConfigError("--labels must name each report")
    table = _markdown_table(reports, labels)
    print(table)
    out_dir = _out_path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "report.md", table + "\n")
    csv_lines = ["metric,value"]
    for label, rep in zip(labels, reports):
        csv_lines += [f"{label}.{k},{v}" for k, v in _flatten({k: v for k, v in rep.items() if k != "config"})]
    if len(reports) == 2:
        delta = compare_reports(reports[0], reports[1])
        csv_lines += [f"delta.{k},{v}" for k, v in _flatten({k: v for k, v in delta.items() if k != "config"})]
    atomic_write_text(out_dir / "report.csv", "\n".join(csv_lines) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="boxrefine", description="Diffusion-based 7-DoF box refinement over synthetic LiDAR scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--profile", default="desk", choices=["desk", "paper"])
        p.add_argument("--config", help="JSON run-config file merged over the profile preset")
        p.add_argument("--seed", type=int, help="root seed override")

    g = sub.add_parser("gen-data", help="generate synthetic scenes and simulated detections")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--train-scenes", type=int)
    g.add_argument("--val-scenes", type=int)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the denoiser on generated scenes")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.add_argument("--batch-size", type=int, help="override train.batch_size")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--progress", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("refine", help="refine detections with a trained checkpoint")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--detections", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--steps", type=int)
    r.add_argument("--shape-weight", type=float)
    r.add_argument("--context", type=float)
    r.add_argument("--mean-size", help="'w,l,h' or 'none'")
    r.add_argument("--solver", choices=["heun", "euler"])
    r.add_argument("--sigma-range", help="'lo,hi' starting-noise range")
    r.add_argument("--nms-threshold", type=float)
    r.add_argument("--score-mode", choices=["displacement", "direct"])
    r.add_argument("--trace", action="store_true", help="emit one CSV trace per refined box")
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="score detections against ground truth")
    common(e)
    e.add_argument("--pred", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--ranges", help="depth buckets, e.g. '0-30,30-50,50-80'")
    e.add_argument("--iou-threshold", type=float)
    e.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="render metric reports as markdown/CSV")
    rep.add_argument("reports", nargs="+", help="metrics.json paths (before [after])")
    rep.add_argument("--labels", help="comma-separated row labels")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except BoxRefineError as exc:  # safety net for future error types
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
