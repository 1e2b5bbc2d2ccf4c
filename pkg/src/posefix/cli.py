"""``posefix`` command line: file-level entry points for every module.

Exit codes:
  0  success
  1  unexpected internal error
  2  bad command line (unknown flag, missing argument)
  3  input error (missing file, malformed COCO / table / config)
  4  training diverged
  5  a self-check failed
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import __version__
from .checks import format_report, run_codec_checks
from .codec import read_heatmaps
from .config import ConfigError, GlobalConfig, load_config
from .core import ERROR_TYPES, ErrorType, SkeletonSpec
from .evaluator import average_precision, delta_table, metrics_csv, metrics_json, oks_matrix
from .pipeline import (
    CocoFormatError,
    CocoGroundTruth,
    Detection,
    bbox_from_pose,
    crop_transform,
    extend_aspect,
    load_coco_ground_truth,
    load_coco_results,
    result_entry,
    save_coco_results,
)
from .refiner import TrainingDiverged, ablate, evaluate_refiner, load_params, refine, save_params, summarize_ablation, train
from .rng import derive_rng
from .synthesis import synthesize_pose
from .taxonomy import ErrorFrequencyReport, diagnose
from .toy import ToyArrays, generate_toy_dataset

log = logging.getLogger("posefix")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_INPUT, EXIT_DIVERGED, EXIT_CHECK = 0, 1, 2, 3, 4, 5


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: GlobalConfig, seed: Optional[int], inputs: dict, outputs: Sequence[Path], extra: Optional[dict] = None) -> Path:
    """``<out>.manifest.json``: enough to rerun the command and check its artifacts.

    Holds no timestamps or absolute paths so reruns are byte-identical.
    """
    manifest = {
        "command": command,
        "seed": seed,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in sorted(inputs.items()) if v is not None},
        "outputs": {Path(p).name: _sha256(p) for p in outputs},
        "versions": {"posefix": __version__, "numpy": np.__version__, "pyyaml": yaml.__version__, "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    path = Path(str(out) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items() if k in columns})
    return buf.getvalue()


def match_detections(gt: CocoGroundTruth, dets: dict, spec: SkeletonSpec) -> list[tuple[Detection, object]]:
    """Pair each detection with one ground-truth instance of its image.

    Detections go in descending score order (ties by file position) and take
    the free usable instance with the highest OKS; ties keep the lower id.
    """
    by_image = gt.by_image()
    pairs = []
    for image_id in sorted(dets, key=lambda x: (str(type(x)), x)):
        cands = sorted((g for g in by_image.get(image_id, []) if g.usable), key=lambda g: g.ann_id)
        ds = sorted(dets[image_id], key=lambda d: (-d.score, d.index))
        o = oks_matrix(ds, cands, spec.kappa_array)
        free = [True] * len(cands)
        for di, d in enumerate(ds):
            best = -1
            for gi in range(len(cands)):
                if free[gi] and (best < 0 or o[di, gi] > o[di, best]):
                    best = gi
            if best >= 0:
                free[best] = False
                pairs.append((d, cands[best].ann_id))
            else:
                pairs.append((d, None))
    pairs.sort(key=lambda p: p[0].index)
    return pairs


def _load_image(images_dir: Optional[Path], image_id, size) -> np.ndarray:
    if images_dir is not None:
        p = images_dir / f"{image_id}.f32"
        if p.is_file():
            img = read_heatmaps(p)
            if img.shape[0] != 3:
                raise CocoFormatError(f"{p}: expected 3 image channels, got {img.shape[0]}")
            return img
    w, h = size
    return np.zeros((3, max(h, 1), max(w, 1)), dtype=np.float32)


# --------------------------------------------------------------------------
# subcommands


def cmd_synthesize(args, cfg: GlobalConfig) -> int:
    spec = cfg.skeleton_spec()
    table = cfg.error_table(spec, args.table)
    synth = cfg.synthesis_config(args.seed)
    gt = load_coco_ground_truth(args.gt, spec)
    entries, labels = [], []
    for g in gt.instances:
        if not g.usable:
            continue
        res = synthesize_pose(g.context, spec, table, synth, derive_rng(args.seed, "synthesize", g.ann_id))
        labels.append(
            {
                "result_index": len(entries),
                "image_id": g.image_id,
                "ann_id": g.ann_id,
                "error_types": [t.value if t is not None else None for t in res.error_types],
                "fallbacks": list(res.fallbacks),
            }
        )
        entries.append(result_entry(g.image_id, res.pose, g.category_id, score=1.0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_coco_results(entries, out)
    counts = {t.value: 0 for t in ERROR_TYPES}
    for lab in labels:
        for t in lab["error_types"]:
            if t is not None:
                counts[t] += 1
    labels_path = Path(str(out) + ".labels.json")
    sidecar = {"format": "posefix-labels-v1", "joint_names": list(spec.joint_names), "seed": args.seed, "counts": counts, "instances": labels}
    _write(labels_path, json.dumps(sidecar, indent=2) + "\n")
    write_manifest(out, "synthesize", cfg, args.seed, {"gt": Path(args.gt)}, [out, labels_path], {"table": args.table or cfg.table})
    print(f"synthesized {len(entries)} instances -> {out}")
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_diagnose(args, cfg: GlobalConfig) -> int:
    spec = cfg.skeleton_spec()
    gt = load_coco_ground_truth(args.gt, spec)
    dets = load_coco_results(args.dt, spec)
    truths = {g.ann_id: g.context for g in gt.instances if g.usable}
    if args.labels:
        sidecar = json.loads(Path(args.labels).read_text())
        by_index = {d.index: d for v in dets.values() for d in v}
        pairs = []
        for inst in sidecar["instances"]:
            if inst["result_index"] not in by_index:
                raise CocoFormatError(f"{args.labels}: result_index {inst['result_index']} not in {args.dt}")
            pairs.append((by_index[inst["result_index"]], inst["ann_id"]))
    else:
        pairs = match_detections(gt, dets, spec)
    report = diagnose(((d.pose, a) for d, a in pairs), truths, spec, cfg.thresholds())
    d = report.to_dict()
    if args.labels:
        recorded = ErrorFrequencyReport(spec.joint_names)
        for inst in sidecar["instances"]:
            for j, t in enumerate(inst["error_types"]):
                if t is not None:
                    recorded.add(j, ErrorType(t))
        d["recorded_counts_match"] = bool(np.array_equal(recorded.counts, report.counts))
    out = Path(args.out)
    _write(out, json.dumps(d, indent=2) + "\n")
    outputs = [out]
    if args.csv:
        outputs.append(_write(Path(args.csv), report.to_csv()))
    write_manifest(out, "diagnose", cfg, None, {"gt": Path(args.gt), "dt": Path(args.dt), "labels": Path(args.labels) if args.labels else None}, outputs)
    print(" ".join(f"{k}={v}" for k, v in d["overall"].items()) + f" skipped={report.skipped}")
    if "recorded_counts_match" in d:
        print(f"recorded labels reproduced: {d['recorded_counts_match']}")
    return EXIT_OK


def cmd_evaluate(args, cfg: GlobalConfig) -> int:
    spec = cfg.skeleton_spec()
    params = cfg.eval_params()
    gt = load_coco_ground_truth(args.gt, spec)
    after = average_precision(gt, load_coco_results(args.dt, spec), spec, params)
    inputs = {"gt": Path(args.gt), "dt": Path(args.dt)}
    if args.dt_before:
        before = average_precision(gt, load_coco_results(args.dt_before, spec), spec, params)
        rows = delta_table(before, after)
        inputs["dt_before"] = Path(args.dt_before)
        print(f"{'metric':<7}{'before':>9}{'after':>9}{'delta':>9}")
        for r in rows:
            f = lambda v: "      n/a" if v is None else f"{v:9.4f}"
            print(f"{r['metric']:<7}{f(r['before'])}{f(r['after'])}{f(r['delta'])}")
        payload, table_rows = {"before": before.to_dict(), "after": after.to_dict(), "delta": {r["metric"]: r["delta"] for r in rows}}, rows
    else:
        print(after.format())
        payload, table_rows = after.to_dict(), [{"metric": k, "value": v} for k, v in after.to_dict().items()]
    outputs = []
    if args.json:
        outputs.append(_write(Path(args.json), metrics_json(payload)))
    if args.csv:
        outputs.append(_write(Path(args.csv), metrics_csv(table_rows)))
    if outputs:
        write_manifest(outputs[0], "evaluate", cfg, None, inputs, outputs)
    return EXIT_OK


def cmd_codec_check(args, cfg: GlobalConfig) -> int:
    results = run_codec_checks(args.seed, quick=args.quick)
    text = format_report(results)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        _write(out, json.dumps([r._asdict() for r in results], indent=2) + "\n")
        write_manifest(out, "codec-check", cfg, args.seed, {}, [out])
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def _toy_data(cfg: GlobalConfig, spec, rcfg, seed: int, train_n: Optional[int] = None, eval_n: Optional[int] = None):
    toy = cfg.toy_config()
    table = cfg.toy_table(spec)
    synth = cfg.synthesis_config(seed)
    n_tr = train_n or toy.train_samples
    n_ev = eval_n or toy.eval_samples
    tr = generate_toy_dataset(n_tr, spec, table, seed, size=rcfg.input_size, synthesis=synth)
    ev = generate_toy_dataset(n_ev, spec, table, seed, size=rcfg.input_size, synthesis=synth, start=n_tr)
    return ToyArrays.stack(tr), ToyArrays.stack(ev)


def cmd_train_toy(args, cfg: GlobalConfig) -> int:
    spec = cfg.skeleton_spec()
    seed = args.seed if args.seed is not None else cfg.toy_config().seed
    overrides = {"seed": seed}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.loss_mode:
        overrides["loss_mode"] = args.loss_mode
    rcfg = cfg.refiner_config(**overrides)
    tr, ev = _toy_data(cfg, spec, rcfg, seed, args.train_samples, args.eval_samples)
    result = train(tr, rcfg, spec, eval_set=ev)
    final = evaluate_refiner(result.params, ev, rcfg, spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, rcfg, out, {"final": final})
    metrics_path = Path(str(out) + ".metrics.csv")
    rows = [asdict(m) for m in result.history]
    _write(metrics_path, _csv(rows, ["epoch", "loss", "lr", "input_oks", "refined_oks"]))
    write_manifest(out, "train-toy", cfg, seed, {}, [out, Path(str(out) + ".json"), metrics_path], {"final": final})
    print(f"held-out mean OKS: input {final['input_oks']:.4f} -> refined {final['refined_oks']:.4f}")
    return EXIT_OK


def cmd_refine(args, cfg: GlobalConfig) -> int:
    spec = cfg.skeleton_spec()
    params, rcfg = load_params(args.params)
    gt = load_coco_ground_truth(args.gt, spec)
    dets = load_coco_results(args.dt, spec)
    sizes = {im.get("id"): (int(im.get("width", 0)), int(im.get("height", 0))) for im in gt.images}
    images_dir = Path(args.images) if args.images else None
    flat = sorted((d for v in dets.values() for d in v), key=lambda d: d.index)
    entries = []
    for d in flat:
        if d.pose.num_labeled < 2 or np.ptp(d.pose.xy[d.pose.labeled], axis=0).min() <= 0:
            entries.append(result_entry(d.image_id, d.pose, d.category_id))  # nothing to crop around
            continue
        img = _load_image(images_dir, d.image_id, sizes.get(d.image_id, rcfg.input_size))
        w, h = rcfg.input_size
        t = crop_transform(extend_aspect(bbox_from_pose(d.pose), h / w), w, h)
        refined = refine(params, img, d.pose, rcfg, args.flip_tta, spec=spec, transform=t)
        entries.append(result_entry(d.image_id, refined, d.category_id))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_coco_results(entries, out)
    before = average_precision(gt, dets, spec, cfg.eval_params())
    after = average_precision(gt, load_coco_results(out, spec), spec, cfg.eval_params())
    print(f"AP {before['AP'] if before['AP'] is None else round(before['AP'], 4)} -> {after['AP'] if after['AP'] is None else round(after['AP'], 4)}")
    write_manifest(out, "refine", cfg, rcfg.seed, {"params": Path(args.params), "gt": Path(args.gt), "dt": Path(args.dt)}, [out], {"flip_tta": args.flip_tta})
    return EXIT_OK


def cmd_ablate(args, cfg: GlobalConfig) -> int:
    spec = cfg.skeleton_spec()
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",")]
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    base = cfg.refiner_config(**overrides)
    for m in modes:
        replace(base, loss_mode=m)  # validate names before spending time on training
    data_seed = args.seed if args.seed is not None else cfg.toy_config().seed
    tr, ev = _toy_data(cfg, spec, base, data_seed, args.train_samples, args.eval_samples)
    rows = ablate(tr, ev, base, modes, seeds, spec)
    summary = summarize_ablation(rows)
    out = Path(args.out)
    _write(out, _csv(summary, ["mode", "seeds", "input_oks", "refined_oks_mean", "refined_oks_std"]))
    runs = Path(str(out.with_suffix("")) + ".runs.csv")
    _write(runs, _csv(rows, ["mode", "seed", "input_oks", "refined_oks", "final_loss"]))
    write_manifest(out, "ablate", cfg, data_seed, {}, [out, runs], {"modes": modes, "seeds": seeds})
    for s in summary:
        print(f"{s['mode']:<12} refined OKS {s['refined_oks_mean']:.4f} +- {s['refined_oks_std']:.4f} (input {s['input_oks']:.4f})")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posefix", description="Pose error diagnosis, synthesis, evaluation and toy refinement.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="YAML/JSON file overriding defaults")
    p.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default from config)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="corrupt ground-truth poses into a COCO results file")
    s.add_argument("--gt", required=True)
    s.add_argument("--table", help="table file or builtin name (default from config)")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("diagnose", help="error-type histogram of results against ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--dt", required=True)
    s.add_argument("--labels", help="synthesize's .labels.json; pairs results with instances directly")
    s.add_argument("--out", required=True, help="JSON report")
    s.add_argument("--csv", help="per-joint CSV table")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("evaluate", help="OKS AP/AR, optionally before/after")
    s.add_argument("--gt", required=True)
    s.add_argument("--dt", required=True)
    s.add_argument("--dt-before")
    s.add_argument("--json")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("codec-check", help="codec round trips and gradient checks")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--quick", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_codec_check)

    s = sub.add_parser("train-toy", help="train the refiner on rendered stick figures")
    s.add_argument("--out", required=True, help="params file; a .json manifest is written beside it")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--loss-mode")
    s.add_argument("--train-samples", type=int)
    s.add_argument("--eval-samples", type=int)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("refine", help="refine a COCO results file with trained params")
    s.add_argument("--params", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--dt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--images", help="directory of <image_id>.f32 tensor dumps (3 x H x W)")
    s.add_argument("--flip-tta", action="store_true")
    s.set_defaults(func=cmd_refine)

    s = sub.add_parser("ablate", help="compare loss modes under one training budget")
    s.add_argument("--modes", default="C2F,C2C,F2F,C2F_LH,C2F_LC")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--seed", type=int, help="toy data seed")
    s.add_argument("--epochs", type=int)
    s.add_argument("--train-samples", type=int)
    s.add_argument("--eval-samples", type=int)
    s.add_argument("--out", required=True, help="summary CSV; per-run rows go to <out>.runs.csv")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"posefix: config error: {e}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=(args.log_level or cfg.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, cfg)
    except TrainingDiverged as e:
        print(f"posefix: training diverged: {e} (samples {e.sample_indices[:10]})", file=sys.stderr)
        return EXIT_DIVERGED
    except (CocoFormatError, ConfigError, FileNotFoundError, json.JSONDecodeError, KeyError) as e:
        print(f"posefix: input error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as e:
        print(f"posefix: input error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
