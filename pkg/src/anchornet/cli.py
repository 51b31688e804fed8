"""Command-line surface: dataset generation, training, inference, reports.

Every file-producing command writes a JSON run manifest (command, config,
seed, inputs, outputs, versions) alongside its primary output, and all
randomness flows from --seed, so a rerun with an identical manifest
reproduces identical outputs.  Evaluation commands write a CSV plus
rendered figures next to it.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from . import model as model_mod
from . import netpbm, pipeline, report, synth, tensor, training, weights
from .model import ArchSpec, DownstreamModel, count_flops, default_anchornet_spec
from .patches import SelectionConfig
from .pipeline import PipelineCosts, ThresholdSchedule, unreachable_thresholds
from .rf import RfConstraintError
from .training import TrainConfig


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# Shared helpers


def _write_manifest(primary_output: str, command: str, args: argparse.Namespace,
                    inputs: list[str], outputs: list[str]) -> str:
    path = (
        os.path.join(primary_output, "manifest.json")
        if os.path.isdir(primary_output)
        else primary_output + ".manifest.json"
    )
    config = {
        k: v for k, v in sorted(vars(args).items()) if k != "func" and v is not None
    }
    manifest = {
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "versions": {"anchornet": __version__, "numpy": np.__version__},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _resolve_anchornet_spec(name: str, classes: int) -> ArchSpec:
    if name in ("default", "anchornet"):
        return default_anchornet_spec(num_classes=classes)
    with open(name) as fh:
        return ArchSpec.from_text(fh.read())


def _load_models(args):
    anchor = weights.load_model(args.anchornet)
    f_global = weights.load_model(args.global_net)
    f_local = weights.load_model(args.local_net)
    return anchor, f_global, f_local


def _selection_config(args) -> SelectionConfig:
    return SelectionConfig(iou_threshold=args.theta, max_patches=args.max_patches)


def _parse_thresholds(text: str) -> ThresholdSchedule:
    return ThresholdSchedule(tuple(float(v) for v in text.split(",")))


def _read_image(path: str) -> np.ndarray:
    return netpbm.hwc_u8_to_chw_float(netpbm.read_ppm(path))


def _eval_csv(path: str, rows: list[dict], label_name: str, t_max: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [label_name, "mean_flops", "accuracy"] + [
            f"exit_{t}" for t in range(1, t_max + 1)
        ]
        if any("thresholds" in row for row in rows):
            header.append("thresholds")
        writer.writerow(header)
        for row in rows:
            out = [row["label"], f"{row['mean_flops']:.1f}", f"{row['accuracy']:.6f}"]
            out += [str(c) for c in row["exit_counts"]]
            if "thresholds" in row:
                out.append("|".join(f"{v:.6f}" for v in row["thresholds"]))
            writer.writerow(out)


# ---------------------------------------------------------------------------
# Commands


def cmd_rf_table(args) -> int:
    spec = _resolve_anchornet_spec(args.spec, args.classes)
    model = model_mod.build_anchornet(spec, seed=0)
    table = model.stage_table((args.input_size, args.input_size))
    lines = ["OR   kernel  RF   S  op      exp   out"]
    for row in table:
        exp = "-" if row["expansion"] is None else model_mod._fmt_ratio(row["expansion"])
        lines.append(
            f"{row['out_resolution']:>3}  {row['kernel']}x{row['kernel']}  "
            f"{row['rf']:>2}  {row['acc_stride']:>2}  {row['op']:<6}  {exp:>4}  "
            f"{row['out_channels']:>3}"
        )
    final = table[-1]
    lines.append(f"final: rf {final['rf']}  stride {final['acc_stride']}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["stage", "out_resolution", "op", "kernel", "expansion",
                 "out_channels", "stride", "rf", "acc_stride"]
            )
            for row in table:
                writer.writerow(
                    [row["stage"], row["out_resolution"], row["op"], row["kernel"],
                     row["expansion"] if row["expansion"] is not None else "",
                     row["out_channels"], row["stride"], row["rf"], row["acc_stride"]]
                )
        _write_manifest(args.out, "rf-table", args, [], [args.out])
    return 0


def cmd_flops(args) -> int:
    if args.spec == "downstream":
        model = model_mod.build_downstream(args.classes, seed=0)
    else:
        model = model_mod.build_anchornet(
            _resolve_anchornet_spec(args.spec, args.classes), seed=0
        )
    counts = count_flops(model, args.input_size)
    lines = [f"{row.name:<24} {row.kind:<8} {row.flops:>12}" for row in counts.rows]
    lines.append(f"{'total':<24} {'':<8} {counts.total:>12}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "kind", "flops"])
            for row in counts.rows:
                writer.writerow([row.name, row.kind, row.flops])
            writer.writerow(["total", "", counts.total])
        _write_manifest(args.out, "flops", args, [], [args.out])
    return 0


def cmd_gen_data(args) -> int:
    synth.generate_synthetic(
        args.classes, args.per_class, args.seed, args.out, image_size=args.image_size
    )
    manifest = _write_manifest(args.out, "gen-data", args, [], [args.out])
    print(f"wrote {args.classes * args.per_class} images under {args.out} ({manifest})")
    return 0


def _train_config(args, schedule_default: str) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        schedule=args.schedule or schedule_default,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        seed=args.seed,
        augment_flip=not args.no_flip,
        sequence_norm=args.sequence_norm,
    )


def _write_curves(out: str, history) -> list[str]:
    curves = out + ".curves.csv"
    with open(curves, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy", "lr"])
        for h in history:
            writer.writerow([h.epoch, f"{h.loss:.6f}", f"{h.accuracy:.6f}", f"{h.lr:.6g}"])
    figure = out + ".curves.png"
    report.save_training_curves(history, figure)
    return [curves, figure]


def cmd_train_anchornet(args) -> int:
    dataset = synth.load_dataset(args.data)
    spec = _resolve_anchornet_spec(args.spec, dataset.num_classes)
    config = _train_config(args, "step")
    model = training.train_anchornet(dataset, config, spec=spec)
    weights.save_model(model, args.out)
    extra = _write_curves(args.out, model.train_history)
    _write_manifest(args.out, "train-anchornet", args, [args.data], [args.out] + extra)
    last = model.train_history[-1]
    print(f"trained {args.epochs} epochs: loss {last.loss:.4f} accuracy {last.accuracy:.3f}")
    return 0


def cmd_finetune(args) -> int:
    dataset = synth.load_dataset(args.data)
    config = _train_config(args, "cosine")
    if args.init:
        f = weights.load_model(args.init)
        if not isinstance(f, DownstreamModel):
            raise CliError("--init must point to a downstream checkpoint")
    else:
        f = model_mod.build_downstream(dataset.num_classes, seed=args.seed, variant=args.variant)
    inputs = [args.data]
    if args.variant == "global":
        training.finetune_global(f, dataset, config, sequence_len=args.max_patches + 1)
    else:
        if not args.anchornet:
            raise CliError("finetune --variant local requires --anchornet")
        anchor = weights.load_model(args.anchornet)
        inputs.append(args.anchornet)
        training.finetune_local(f, dataset, anchor, _selection_config(args), config)
    f.variant = args.variant
    weights.save_model(f, args.out)
    extra = _write_curves(args.out, f.train_history)
    _write_manifest(args.out, "finetune", args, inputs, [args.out] + extra)
    last = f.train_history[-1]
    print(f"finetuned {args.variant}: loss {last.loss:.4f} accuracy {last.accuracy:.3f}")
    return 0


def cmd_infer(args) -> int:
    anchor, f_global, f_local = _load_models(args)
    image = _read_image(args.image)
    cfg = _selection_config(args)
    seq = pipeline.make_sequence(image, anchor, cfg)
    thresholds = (
        _parse_thresholds(args.thresholds)
        if args.thresholds
        else unreachable_thresholds(len(seq))
    )
    costs = PipelineCosts.from_models(
        anchor, f_global, f_local, input_size=image.shape[1:]
    )
    trace = pipeline.run_sequence(f_global, f_local, seq, thresholds, costs)
    lines = []
    for t in range(1, trace.exit_stage + 1):
        lines.append(json.dumps({
            "stage": t,
            "confidence": round(trace.stage_confidences[t - 1], 6),
            "exit": t == trace.exit_stage,
            "class": int(np.argmax(trace.stage_scores[t - 1])),
            "flops": pipeline.trace_flops(t, costs),
        }))
    text = "\n".join(lines)
    print(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
        _write_manifest(
            args.out, "infer", args,
            [args.image, args.anchornet, args.global_net, args.local_net], [args.out],
        )
    return 0


def _draw_box(pixels: np.ndarray, box, color, width: int = 2) -> None:
    h, w = pixels.shape[:2]
    t, l = box.top, box.left
    b, r = min(box.bottom, h), min(box.right, w)
    pixels[t : min(t + width, h), l:r] = color
    pixels[max(b - width, 0) : b, l:r] = color
    pixels[t:b, l : min(l + width, w)] = color
    pixels[t:b, max(r - width, 0) : r] = color


BOX_COLORS = ((255, 32, 32), (255, 160, 0), (255, 255, 0), (0, 220, 0), (0, 200, 255))


def cmd_cam_dump(args) -> int:
    anchor = weights.load_model(args.anchornet)
    if not isinstance(anchor, model_mod.AnchorNetModel):
        raise CliError("cam-dump requires an anchornet checkpoint")
    image = _read_image(args.image)
    cfg = _selection_config(args)
    seq = pipeline.make_sequence(image, anchor, cfg)

    with tensor.no_grad():
        feats = anchor.forward_features(image[None])
    cam = anchor.cam(feats, seq.cam_class)
    lo, hi = float(cam.values.min()), float(cam.values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    heat = np.round((cam.values - lo) * scale).astype(np.uint8)

    prefix = args.out_prefix
    cam_path, boxes_path, annotated_path = (
        prefix + ".cam.pgm", prefix + ".boxes.csv", prefix + ".annotated.ppm",
    )
    netpbm.write_pgm(cam_path, heat)

    image_id = os.path.basename(args.image)
    with open(boxes_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "rank", "top", "left", "size", "activation"])
        for rank, item in enumerate(seq.items[1:], start=1):
            writer.writerow(
                [image_id, rank, item.box.top, item.box.left, item.box.height,
                 f"{item.activation:.6f}"]
            )

    annotated = netpbm.chw_float_to_hwc_u8(image).copy()
    for rank, item in enumerate(seq.items[1:], start=1):
        _draw_box(annotated, item.box, BOX_COLORS[(rank - 1) % len(BOX_COLORS)])
    netpbm.write_ppm(annotated_path, annotated)

    _write_manifest(
        prefix + ".cam.pgm", "cam-dump", args, [args.image, args.anchornet],
        [cam_path, boxes_path, annotated_path],
    )
    print(f"class {seq.cam_class}: wrote {cam_path}, {boxes_path}, {annotated_path}")
    return 0


def cmd_eval_anytime(args) -> int:
    anchor, f_global, f_local = _load_models(args)
    dataset = synth.load_dataset(args.data)
    cfg = _selection_config(args)
    costs = PipelineCosts.from_models(anchor, f_global, f_local)
    traces = pipeline.collect_traces(dataset, anchor, f_global, f_local, cfg,
                                     batch_size=args.batch_size)
    t_max = max(tr.seq_len for tr in traces)
    stages = [int(s) for s in args.stages.split(",")]
    rows = []
    for stage in stages:
        res = pipeline.anytime_eval(traces, costs, stage)
        rows.append({"label": stage, "mean_flops": res.mean_flops,
                     "accuracy": res.accuracy, "exit_counts": res.exit_counts})
    _eval_csv(args.out, rows, "stage", t_max)
    curve, hist = args.out + ".png", args.out + ".exits.png"
    report.save_tradeoff_curve(rows, curve)
    report.save_exit_histogram(rows, hist)
    _write_manifest(args.out, "eval-anytime", args,
                    [args.data, args.anchornet, args.global_net, args.local_net],
                    [args.out, curve, hist])
    for row in rows:
        print(f"stage {row['label']}: accuracy {row['accuracy']:.4f} "
              f"mean_flops {row['mean_flops']:.0f}")
    return 0


def _parse_budgets(text: str, costs: PipelineCosts, traces) -> list[float]:
    lo = float(pipeline.trace_flops(1, costs))
    hi = float(np.mean([pipeline.trace_flops(tr.seq_len, costs) for tr in traces]))
    budgets = []
    for token in text.split(","):
        token = token.strip()
        if token.endswith("%"):
            frac = float(token[:-1]) / 100.0
            budgets.append(lo + frac * (hi - lo))
        else:
            budgets.append(float(token))
    return budgets


def cmd_eval_budgeted(args) -> int:
    anchor, f_global, f_local = _load_models(args)
    dataset = synth.load_dataset(args.data)
    cfg = _selection_config(args)
    costs = PipelineCosts.from_models(anchor, f_global, f_local)
    traces = pipeline.collect_traces(dataset, anchor, f_global, f_local, cfg,
                                     batch_size=args.batch_size)
    if args.tune_data:
        tune_ds = synth.load_dataset(args.tune_data)
        tune_traces = pipeline.collect_traces(tune_ds, anchor, f_global, f_local, cfg,
                                              batch_size=args.batch_size)
    else:
        tune_traces = traces
    t_max = max(tr.seq_len for tr in traces)

    rows = []
    if args.thresholds:
        schedule = _parse_thresholds(args.thresholds)
        res = pipeline.budgeted_eval(traces, costs, schedule)
        rows.append({"label": "manual", "mean_flops": res.mean_flops,
                     "accuracy": res.accuracy, "exit_counts": res.exit_counts,
                     "thresholds": schedule.values})
    if args.budgets:
        for budget in _parse_budgets(args.budgets, costs, tune_traces):
            schedule = pipeline.tune_thresholds(tune_traces, costs, budget)
            res = pipeline.budgeted_eval(traces, costs, schedule)
            rows.append({"label": f"{budget:.0f}", "mean_flops": res.mean_flops,
                         "accuracy": res.accuracy, "exit_counts": res.exit_counts,
                         "thresholds": schedule.values})
    if not rows:
        raise CliError("eval-budgeted needs --budgets and/or --thresholds")
    _eval_csv(args.out, rows, "budget", t_max)
    curve, hist = args.out + ".png", args.out + ".exits.png"
    report.save_tradeoff_curve(rows, curve)
    report.save_exit_histogram(rows, hist)
    inputs = [args.data, args.anchornet, args.global_net, args.local_net]
    if args.tune_data:
        inputs.append(args.tune_data)
    _write_manifest(args.out, "eval-budgeted", args, inputs, [args.out, curve, hist])
    for row in rows:
        print(f"budget {row['label']}: accuracy {row['accuracy']:.4f} "
              f"mean_flops {row['mean_flops']:.0f} exits {row['exit_counts']}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_selection_flags(p):
    p.add_argument("--theta", type=float, default=0.3,
                   help="IoU threshold for patch suppression")
    p.add_argument("--max-patches", type=int, default=4,
                   help="patch budget (sequence length minus the resized image)")


def _add_model_flags(p):
    p.add_argument("--anchornet", required=True, help="proposal network checkpoint")
    p.add_argument("--global-net", dest="global_net", required=True,
                   help="stage-1 classifier checkpoint")
    p.add_argument("--local-net", dest="local_net", required=True,
                   help="patch classifier checkpoint")


def _add_train_flags(p, epochs, lr):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--schedule", choices=["step", "cosine"], default=None)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--no-flip", action="store_true", help="disable flip augmentation")
    p.add_argument("--sequence-norm", choices=["literal", "per_item"], default="literal")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchornet",
        description="Patch-proposal network with early-exit sequential inference",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rf-table", help="per-stage resolution / receptive-field table")
    p.add_argument("spec", help="'default', 'anchornet', or an arch file")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--input-size", type=int, default=224)
    p.add_argument("--out", help="also write the table as CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_rf_table)

    p = sub.add_parser("flops", help="per-layer forward cost")
    p.add_argument("spec", help="'default', 'anchornet', 'downstream', or an arch file")
    p.add_argument("input_size", type=int)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--out", help="also write the per-layer counts as CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gen-data", help="generate the synthetic localization benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-anchornet", help="stage I: train the proposal network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default="default")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p, epochs=14, lr=0.1)
    p.set_defaults(func=cmd_train_anchornet)

    p = sub.add_parser("finetune", help="stage II: finetune a downstream classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["global", "local"], required=True)
    p.add_argument("--anchornet", help="required for --variant local")
    p.add_argument("--init", help="downstream checkpoint to start from")
    p.add_argument("--seed", type=int, default=0)
    _add_train_flags(p, epochs=12, lr=0.05)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("infer", help="early-exit inference on one image")
    p.add_argument("image", help="input PPM image")
    _add_model_flags(p)
    p.add_argument("--thresholds", help="comma-separated exit thresholds")
    p.add_argument("--out", help="also write the JSON-lines trace to a file")
    p.add_argument("--seed", type=int, default=0)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("cam-dump", help="activation heatmap and selected boxes")
    p.add_argument("image", help="input PPM image")
    p.add_argument("--anchornet", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_cam_dump)

    p = sub.add_parser("eval-anytime", help="fixed-exit evaluation over a dataset")
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--stages", default="1,2,3,4,5")
    p.add_argument("--out", required=True, help="CSV output; figures land beside it")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_eval_anytime)

    p = sub.add_parser("eval-budgeted", help="threshold-tuned evaluation under budgets")
    p.add_argument("--data", required=True)
    _add_model_flags(p)
    p.add_argument("--budgets", help="comma-separated FLOPs, or spans like '50%%'")
    p.add_argument("--thresholds", help="evaluate one explicit schedule")
    p.add_argument("--tune-data", help="separate split for threshold tuning")
    p.add_argument("--out", required=True, help="CSV output; figures land beside it")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    _add_selection_flags(p)
    p.set_defaults(func=cmd_eval_budgeted)

    return parser


KNOWN_ERRORS = (
    CliError,
    OSError,
    ValueError,
    KeyError,
    RfConstraintError,
    netpbm.NetpbmError,
    weights.WeightFormatError,
    pipeline.InfeasibleBudgetError,
    training.TrainingDivergedError,
    training.StageOrderError,
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
