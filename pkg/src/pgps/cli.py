"""Command-line surface.

Subcommands: plan, synth, sample-stats, train, eval, convergence,
variability, report. Experiment configuration comes from a JSON file with
flag overrides; the only environment variable honored is
PGPS_OUTPUT_ROOT, which roots relative output directories.
"""

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from . import segnet
from .harness import (
    ExperimentConfig,
    resolve_dataset,
    run_convergence_suite,
    run_variability_suite,
    save_run,
    train_and_evaluate,
)
from .rng import RngStream
from .sampler import assemble_batch, assemble_progres_batch
from .schedule import (
    ArchConstraints,
    AxisPolicy,
    BatchStrategy,
    CurriculumSchedule,
    Mode,
    SamplingPolicy,
    build_schedule,
)
from .stats import fg_voxel_fraction, mean_fg_dice, unique_class_fraction
from .synth import SynthSpec, generate
from .volume import load_dataset, write_dataset


def _output_path(path: str) -> Path:
    root = os.environ.get("PGPS_OUTPUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _policy_from_doc(doc: dict) -> SamplingPolicy:
    return SamplingPolicy(
        mode=Mode(doc["mode"]),
        axis_policy=AxisPolicy(doc.get("axis_policy", "LowestValue")),
        batch_strategy=BatchStrategy(doc.get("batch_strategy", "SplitCrop")),
        fg_ratio_rule=doc.get("fg_ratio_rule"),
        mirror_axes=tuple(doc.get("mirror_axes", ())),
        seed=int(doc.get("seed", 0)),
    )


def _synth_spec_from_doc(doc: dict) -> SynthSpec:
    return SynthSpec(
        num_volumes=int(doc["num_volumes"]),
        dims_range=tuple(doc["dims_range"]),
        num_classes=int(doc["num_classes"]),
        objects_per_class=tuple(doc.get("objects_per_class", (1, 3))),
        radius_range=tuple(doc.get("radius_range", (3.0, 6.0))),
        smallest_class_frequency=doc.get("smallest_class_frequency"),
        directional_pairs=tuple(tuple(p) for p in doc.get("directional_pairs", ())),
        noise_amplitude=float(doc.get("noise_amplitude", 0.1)),
        seed=int(doc.get("seed", 0)),
    )


def load_config(path, overrides: argparse.Namespace | None = None) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text())
    dataset = doc["dataset"]
    if isinstance(dataset, dict):
        dataset = _synth_spec_from_doc(dataset)
    net_doc = doc["net"]
    net = segnet.SegNetConfig(
        pools_per_axis=tuple(net_doc["pools_per_axis"]),
        num_classes=int(net_doc["num_classes"]),
        base_channels=int(net_doc.get("base_channels", 8)),
        seed=int(net_doc.get("seed", 0)),
    )
    config = ExperimentConfig(
        dataset=dataset,
        net=net,
        policies=[_policy_from_doc(p) for p in doc["policies"]],
        target_patch=tuple(doc["target_patch"]),
        default_batch=int(doc["default_batch"]),
        total_epochs=int(doc["total_epochs"]),
        iterations_per_epoch=int(doc["iterations_per_epoch"]),
        fractions=tuple(doc.get("fractions", (100,))),
        repeats=int(doc.get("repeats", 5)),
        eval_fold=int(doc.get("eval_fold", 0)),
        base_lr=float(doc.get("base_lr", 0.01)),
        momentum=float(doc.get("momentum", 0.99)),
        output_dir=doc.get("output_dir", "runs"),
        seed=int(doc.get("seed", 0)),
        workers=int(doc.get("workers", 1)),
    )
    if overrides is not None:
        if getattr(overrides, "seed", None) is not None:
            config.seed = overrides.seed
        if getattr(overrides, "workers", None) is not None:
            config.workers = overrides.workers
        if getattr(overrides, "epochs", None) is not None:
            config.total_epochs = overrides.epochs
        if getattr(overrides, "iters", None) is not None:
            config.iterations_per_epoch = overrides.iters
        if getattr(overrides, "output", None) is not None:
            config.output_dir = overrides.output
        if getattr(overrides, "policy", None):
            wanted = set(overrides.policy)
            config.policies = [
                p for p in config.policies if p.mode.value in wanted
            ]
            if not config.policies:
                raise SystemExit(f"no configured policy matches {sorted(wanted)}")
    return config


def _cmd_plan(args) -> int:
    policy = SamplingPolicy(mode=Mode(args.mode), axis_policy=AxisPolicy(args.axis_policy))
    schedule = build_schedule(
        policy,
        ArchConstraints(tuple(args.pools)),
        tuple(args.target),
        args.batch,
        args.epochs,
        args.iters,
    )
    text = schedule.to_json()
    if args.out:
        _output_path(args.out).write_text(text)
    else:
        print(text)
    return 0


def _cmd_synth(args) -> int:
    spec = _synth_spec_from_doc(json.loads(Path(args.spec).read_text()))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    dataset = generate(spec)
    out = _output_path(args.out)
    write_dataset(dataset, out)
    print(f"wrote {len(dataset.volumes)} volumes to {out}")
    return 0


def _cmd_sample_stats(args) -> int:
    schedule = CurriculumSchedule.from_json(Path(args.schedule).read_text())
    dataset = load_dataset(args.dataset)
    policy = SamplingPolicy(
        mode=schedule.mode, batch_strategy=BatchStrategy(args.strategy),
        seed=args.seed,
    )
    root = RngStream(policy.seed)
    lines = ["stage,patch,batch,mean_fg_fraction,mean_unique_class_fraction,tensor_voxels"]
    for stage_idx, stage in enumerate(schedule.stages):
        fg_vals, uniq_vals = [], []
        for i in range(args.batches):
            rng = root.child(stage_idx, i)
            if schedule.uses_resampling:
                batch = assemble_progres_batch(
                    dataset, stage, policy, rng, schedule.target_patch, stage_idx
                )
            else:
                batch = assemble_batch(
                    policy.batch_strategy, dataset, stage, policy, rng, stage_idx
                )
            fg_vals.append(fg_voxel_fraction(batch))
            uniq_vals.append(unique_class_fraction(batch, dataset.num_classes))
        patch_str = "x".join(str(s) for s in stage.patch_size)
        lines.append(
            f"{stage_idx},{patch_str},{stage.batch_size},"
            f"{float(np.mean(fg_vals))!r},{float(np.mean(uniq_vals))!r},"
            f"{stage.tensor_voxels}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        _output_path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def _cmd_train(args) -> int:
    config = load_config(args.config, args)
    out_root = _output_path(config.output_dir)
    dataset = resolve_dataset(config)
    fractions = [args.fraction] if args.fraction else list(config.fractions)
    for policy in config.policies:
        for fraction in fractions:
            params, trace, schedule, result = train_and_evaluate(
                config, policy, config.seed, fraction, dataset
            )
            run_dir = out_root / f"{policy.mode.value}_f{fraction:03d}_s{config.seed}"
            save_run(
                run_dir, config, policy, config.seed, fraction, params, trace,
                schedule, result,
            )
            print(
                f"{policy.mode.value} fraction={fraction}% seed={config.seed} "
                f"dice={result['mean']:.4f} -> {run_dir}"
            )
    return 0


def _cmd_eval(args) -> int:
    params = segnet.load_params(args.checkpoint)
    dataset = load_dataset(args.dataset)
    window = tuple(args.window)
    lines = ["patient_id,mean_fg_dice"]
    values = []
    for vol in dataset.volumes:
        pred = segnet.sliding_window_predict(params, vol.image, window)
        dice = mean_fg_dice(pred, vol.labels, dataset.num_classes)
        lines.append(f"{vol.patient_id},{dice!r}")
        if not np.isnan(dice):
            values.append(dice)
    mean = float(np.mean(values)) if values else float("nan")
    lines.append(f"MEAN,{mean!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _output_path(args.out).write_text(text)
    else:
        print(text, end="")
    return 0


def _cmd_convergence(args) -> int:
    config = load_config(args.config, args)
    out_dir = _output_path(args.output or config.output_dir)
    report = run_convergence_suite(config, out_dir)
    if args.svg:
        report_mod.write_convergence_chart(report, out_dir / "convergence.svg")
    for row in report["rows"]:
        print(
            f"{row['mode']:24s} fraction={row['fraction']:3d}% "
            f"dice={row['dice']:.4f} normalized={row['normalized_dice']:.4f}"
        )
    return 0


def _cmd_variability(args) -> int:
    config = load_config(args.config, args)
    out_dir = _output_path(args.output or config.output_dir)
    report = run_variability_suite(config, out_dir)
    for fraction, block in report["fractions"].items():
        for mode, mean in block["mean"].items():
            print(
                f"fraction={fraction:>3s}% {mode:24s} "
                f"dice={mean:.4f} +- {block['sd'][mode]:.4f} "
                f"wins={block['wins'][mode]}/{block['combinations']}"
            )
    return 0


def _cmd_report(args) -> int:
    records = report_mod.load_runs(args.runs)
    rows = report_mod.build_table(records, args.reference)
    csv_text = report_mod.table_to_csv(rows)
    if args.out:
        _output_path(args.out).write_text(csv_text)
    else:
        print(csv_text, end="")
    if args.json:
        _output_path(args.json).write_text(json.dumps(rows, indent=2))
    if args.svg:
        report_mod.write_trace_charts(records, _output_path(args.svg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgps",
        description="Patch-size curriculum training engine for 3D segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="build a curriculum schedule as JSON")
    p.add_argument("--mode", required=True, choices=[m.value for m in Mode])
    p.add_argument("--pools", type=int, nargs=3, required=True, metavar=("P0", "P1", "P2"))
    p.add_argument("--target", type=int, nargs=3, required=True, metavar=("T0", "T1", "T2"))
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--iters", type=int, default=250)
    p.add_argument("--axis-policy", default="LowestValue",
                   choices=[a.value for a in AxisPolicy])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("synth", help="generate a synthetic RVOL dataset")
    p.add_argument("--spec", required=True, help="SynthSpec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("sample-stats", help="per-stage sampling statistics CSV")
    p.add_argument("--schedule", required=True, help="schedule JSON from `plan`")
    p.add_argument("--dataset", required=True)
    p.add_argument("--batches", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default="SplitCrop",
                   choices=[s.value for s in BatchStrategy])
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sample_stats)

    p = sub.add_parser("train", help="train and evaluate configured policies")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", action="append",
                   help="restrict to a policy mode (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--fraction", type=int, choices=(1, 10, 25, 50, 100))
    p.add_argument("--workers", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--output")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--window", type=int, nargs=3, required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("convergence", help="training-length convergence suite")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=_cmd_convergence)

    p = sub.add_parser("variability", help="repeated-run variability suite")
    p.add_argument("--config", required=True)
    p.add_argument("--output")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=_cmd_variability)

    p = sub.add_parser("report", help="benchmark-style table from saved runs")
    p.add_argument("--runs", required=True)
    p.add_argument("--reference", default="CPS")
    p.add_argument("--out")
    p.add_argument("--json")
    p.add_argument("--svg")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
