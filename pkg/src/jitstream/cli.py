"""Operator surface: run online distillation, pretrain on a synthetic
corpus, validate gradients, and sweep configuration knobs.

Exit codes: 0 success, 1 failed validation (gradcheck), 2 configuration
error, 3 runtime numeric failure (the offending frame index goes to
stderr).
"""
from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from .arch import JITNet, count_params, estimate_flops
from .config import ConfigError, RunConfig, load_pretrain_config, load_run_config
from .distill import (
    StreamNumericError,
    process_stream,
    rasterize_teacher,
    read_predictions_jsonl,
)
from .metrics import interval_series, speedup_from_counts
from .nn import load_weights, save_weights
from .nn.gradcheck import run_layer_suite
from .arch import end_to_end_gradient_check
from .pretrain import pretrain
from .streams import (
    ContainerSource,
    NoisyTeacher,
    OracleTeacher,
    RecordedTeacher,
    gen_synthetic_stream,
    write_lvss,
)

CSV_HEADER = "frame,teacher_invoked,updates,a_curr,mean_iou_vs_teacher,delta"
SWEEP_KNOBS = {
    "u_max": int,
    "delta_min": int,
    "lr": float,
    "width_multiplier": float,
    "input_scale": float,
    "skip_connections": lambda v: v.lower() in ("true", "1", "yes", "on"),
    "a_thresh": float,
}


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _csv_value(value: float | None) -> float | None:
    """The exact number a CSV reader will see for this cell."""
    return None if value is None else float(_fmt(value))


def build_world(cfg: RunConfig):
    """Assemble (source, teacher, eval_labels, net) for a run configuration."""
    if cfg.synthetic is not None:
        stream = gen_synthetic_stream(cfg.synthetic)
        teacher = OracleTeacher(stream, cfg.cost.t_teacher)
        eval_labels = stream.labels
        source = stream
    else:
        source = ContainerSource(cfg.container)
        table = read_predictions_jsonl(cfg.recorded_teacher)
        teacher = RecordedTeacher(table, cfg.cost.t_teacher)
        hw = source.frames.shape[1:3]

        def eval_labels(frame_index: int):
            if frame_index not in table:
                return None
            return rasterize_teacher(table[frame_index], cfg.distill.conf_thresh, hw)

    if not cfg.noise.identity:
        teacher = NoisyTeacher(teacher, cfg.noise, seed=cfg.seed)
    net = JITNet(cfg.arch, seed=cfg.seed)
    if cfg.init_snapshot is not None:
        net.load_state(load_weights(cfg.init_snapshot))
    return source, teacher, eval_labels, net


def write_run_csv(path: Path, records) -> None:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(f"{r.frame_index},{int(r.teacher_invoked)},{r.updates_performed},"
                     f"{_fmt(r.a_curr)},{_fmt(r.eval_iou)},{r.delta}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def summarize(cfg: RunConfig, report) -> dict:
    """Run summary; every accuracy figure is computed from the same rounded
    per-frame values the CSV carries, so the summary can be recomputed from
    the CSV exactly."""
    eval_rounded = [_csv_value(r.eval_iou) for r in report.records]
    defined = [v for v in eval_rounded if v is not None]
    cost = speedup_from_counts(report.n_frames, report.teacher_invocations,
                               report.total_updates, cfg.cost)
    frame_hw = ((cfg.synthetic.height, cfg.synthetic.width)
                if cfg.synthetic is not None else None)
    summary = {
        "frames": report.n_frames,
        "teacher_invocations": report.teacher_invocations,
        "teacher_failures": report.teacher_failures,
        "total_updates": report.total_updates,
        "numeric_events": report.numeric_events,
        "teacher_fraction": report.teacher_invocations / report.n_frames,
        "mean_iou": float(np.mean(defined)) if defined else None,
        "speedup": cost.speedup,
        "total_cost_ms": cost.total_ms,
        "iou_intervals_30s": interval_series(eval_rounded, cfg.fps, 30.0),
        "updates_intervals_30s": interval_series(
            [float(r.updates_performed) for r in report.records], cfg.fps, 30.0),
        "seed": cfg.seed,
    }
    if frame_hw is not None:
        summary["param_count"] = count_params(JITNet(cfg.arch, seed=0))
        summary["flops_inference"] = estimate_flops(cfg.arch, frame_hw)
        summary["flops_train_step"] = estimate_flops(cfg.arch, frame_hw, "train_step")
    return summary


def cmd_run(args) -> int:
    try:
        cfg = load_run_config(args.config)
        source, teacher, eval_labels, net = build_world(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(args.out) if args.out else (cfg.out_dir or Path.cwd() / "runs")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        report = process_stream(source, teacher, cfg.distill, net,
                                eval_labels=eval_labels,
                                store_predictions=args.save_predictions)
    except StreamNumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    write_run_csv(out_dir / "run.csv", report.records)
    summary = summarize(cfg, report)
    if cfg.container is not None:
        hw = source.frames.shape[1:3]
        summary["param_count"] = count_params(net)
        summary["flops_inference"] = estimate_flops(cfg.arch, hw)
        summary["flops_train_step"] = estimate_flops(cfg.arch, hw, "train_step")
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.save_predictions:
        stack = np.stack([r.prediction for r in report.records])
        write_lvss(out_dir / "predictions.lvss", stack)
    print(f"run complete: {report.n_frames} frames, "
          f"mean IoU {summary['mean_iou']}, wrote {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    try:
        cfg = load_pretrain_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        net, log = pretrain(cfg)
    except StreamNumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_weights(out, net.state_arrays())
    log_path = out.with_suffix(out.suffix + ".log.csv")
    lines = ["epoch,loss,train_mean_iou"]
    lines += [f"{epoch},{loss:.6f},{miou:.6f}" for epoch, loss, miou in log]
    log_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"pretrained on {cfg.scenes} scenes x {cfg.frames_per_scene} frames, "
          f"{cfg.epochs} epochs; snapshot {out}")
    return 0


def cmd_gradcheck(args) -> int:
    layer_tol = args.tol if args.tol is not None else 1e-4
    net_tol = args.tol * 10 if args.tol is not None else 1e-3
    results = run_layer_suite(seeds=args.seeds, eps=1e-5)
    status = 0
    for kind, (worst, worst_seed) in results.items():
        verdict = "ok" if worst < layer_tol else "FAIL"
        print(f"{kind:<16} max relative error {worst:.3e} (seed {worst_seed})  {verdict}")
        if worst >= layer_tol:
            status = 1
    whole = end_to_end_gradient_check(seed=0)
    verdict = "ok" if whole < net_tol else "FAIL"
    print(f"{'network':<16} max relative error {whole:.3e} (seed 0)  {verdict}")
    if whole >= net_tol:
        status = 1
    return status


def _parse_knobs(raw: list[str]) -> dict[str, list]:
    knobs: dict[str, list] = {}
    for spec in raw:
        if "=" not in spec:
            raise ConfigError(f"knob {spec!r} must look like name=v1,v2,...")
        name, _, values = spec.partition("=")
        name = name.strip()
        if name not in SWEEP_KNOBS:
            raise ConfigError(f"unknown knob {name!r}; valid: {sorted(SWEEP_KNOBS)}")
        cast = SWEEP_KNOBS[name]
        knobs[name] = [cast(v.strip()) for v in values.split(",") if v.strip()]
        if not knobs[name]:
            raise ConfigError(f"knob {name!r} has no values")
    return knobs


def _apply_knobs(cfg: RunConfig, assignment: dict) -> RunConfig:
    distill_fields = {k: v for k, v in assignment.items()
                      if k in ("u_max", "delta_min", "lr", "a_thresh")}
    arch_fields = {k: v for k, v in assignment.items()
                   if k in ("width_multiplier", "input_scale", "skip_connections")}
    distill = dataclasses.replace(cfg.distill, **distill_fields)
    arch = dataclasses.replace(cfg.arch, **arch_fields)
    return dataclasses.replace(cfg, distill=distill, arch=arch)


def cmd_sweep(args) -> int:
    try:
        base = load_run_config(args.config)
        knobs = _parse_knobs(args.knob)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if not knobs:
        print("config error: no knobs given", file=sys.stderr)
        return 2
    out_dir = Path(args.out) if args.out else (base.out_dir or Path.cwd() / "runs")
    out_dir.mkdir(parents=True, exist_ok=True)
    names = sorted(knobs)
    header = names + ["status", "mean_iou", "teacher_fraction", "speedup",
                      "total_updates", "flops_inference"]
    rows = [",".join(header)]
    for combo in itertools.product(*(knobs[n] for n in names)):
        assignment = dict(zip(names, combo))
        cell = [str(v) for v in combo]
        try:
            cfg = _apply_knobs(base, assignment)
            source, teacher, eval_labels, net = build_world(cfg)
            report = process_stream(source, teacher, cfg.distill, net,
                                    eval_labels=eval_labels)
            summary = summarize(cfg, report)
            unstable = (report.numeric_events > 0
                        or (summary["mean_iou"] is not None
                            and summary["mean_iou"] < 0.3))
            status = "unstable" if unstable else "ok"
            cell += [status, _fmt(summary["mean_iou"]),
                     f"{summary['teacher_fraction']:.6f}",
                     f"{summary['speedup']:.4f}", str(summary["total_updates"]),
                     str(summary.get("flops_inference", ""))]
        except StreamNumericError:
            cell += ["unstable", "", "", "", "", ""]
        except (ConfigError, ValueError) as exc:
            print(f"cell {assignment} failed: {exc}", file=sys.stderr)
            cell += ["failed", "", "", "", "", ""]
        rows.append(",".join(cell))
        print(rows[-1])
    (out_dir / "sweep.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return 0


def _limit_threads() -> None:
    cap = os.environ.get("JITSTREAM_THREADS")
    if not cap:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(cap))
    except (ImportError, ValueError):
        pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="jitstream",
        description="Online distillation of a compact segmentation student")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run online distillation on a stream")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--save-predictions", action="store_true")
    run_p.set_defaults(fn=cmd_run)

    pre_p = sub.add_parser("pretrain", help="pretrain on a synthetic corpus")
    pre_p.add_argument("--config", required=True)
    pre_p.add_argument("--out", required=True)
    pre_p.set_defaults(fn=cmd_pretrain)

    grad_p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    grad_p.add_argument("--tol", type=float, default=None)
    grad_p.add_argument("--seeds", type=int, default=20)
    grad_p.set_defaults(fn=cmd_gradcheck)

    sweep_p = sub.add_parser("sweep", help="run a cross product of config knobs")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--knob", action="append", default=[],
                         metavar="name=v1,v2,...")
    sweep_p.add_argument("--out", default=None)
    sweep_p.set_defaults(fn=cmd_sweep)

    args = parser.parse_args(argv)
    _limit_threads()
    return args.fn(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
