"""Experiment orchestration: training loops, evaluation, convergence and
variability suites.

End-to-end determinism contract: given the same config and seed, every
emitted number except wall-clock timings is bitwise identical, regardless
of the number of sampler workers.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from . import segnet
from .rng import RngStream
from .sampler import PatchBatch, assemble_batch, assemble_progres_batch, mirror_augment
from .schedule import (
    ArchConstraints,
    CurriculumSchedule,
    SamplingPolicy,
    build_schedule,
)
from .stats import (
    RunTrace,
    fg_voxel_fraction,
    mean_fg_dice,
    triplet_win_counts,
    unique_class_fraction,
)
from .synth import SynthSpec, generate
from .volume import VolumeDataset, load_dataset

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e4


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exploded."""


@dataclass
class ExperimentConfig:
    dataset: str | SynthSpec
    net: segnet.SegNetConfig
    policies: list[SamplingPolicy]
    target_patch: tuple[int, int, int]
    default_batch: int
    total_epochs: int
    iterations_per_epoch: int
    fractions: tuple[int, ...] = (100,)
    repeats: int = 5
    eval_fold: int = 0
    base_lr: float = 0.01
    momentum: float = 0.99
    lr_power: float = 0.9
    output_dir: str = "runs"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.target_patch = tuple(int(t) for t in self.target_patch)
        self.fractions = tuple(int(f) for f in self.fractions)
        bad = [f for f in self.fractions if f not in (1, 10, 25, 50, 100)]
        if bad:
            raise ValueError(f"fractions must be within (1, 10, 25, 50, 100), got {bad}")


def scaled_iterations(iterations_per_epoch: int, fraction: int) -> int:
    """Training-length fractions scale the iterations per epoch."""
    if iterations_per_epoch == 0:
        return 0
    return max(1, round(iterations_per_epoch * fraction / 100))


def resolve_dataset(config: ExperimentConfig) -> VolumeDataset:
    if isinstance(config.dataset, SynthSpec):
        return generate(config.dataset)
    return load_dataset(config.dataset)


def split_dataset(dataset: VolumeDataset, fold: int = 0):
    """Hold out one of five chunks by manifest order; fold 0 is the last
    ceil(20%) of volumes."""
    n = len(dataset.volumes)
    if not 0 <= fold < 5:
        raise ValueError("fold must be in [0, 5)")
    chunk = math.ceil(n / 5)
    stop = n - fold * chunk
    start = max(0, stop - chunk)
    held = dataset.volumes[start:stop]
    train = dataset.volumes[:start] + dataset.volumes[stop:]
    if not held or not train:
        raise ValueError(f"cannot split {n} volumes into train/held-out")
    return (
        VolumeDataset(volumes=train, num_classes=dataset.num_classes),
        VolumeDataset(volumes=held, num_classes=dataset.num_classes),
    )


def build_run_schedule(
    config: ExperimentConfig, policy: SamplingPolicy, fraction: int = 100
) -> CurriculumSchedule:
    arch = ArchConstraints(config.net.pools_per_axis)
    return build_schedule(
        policy,
        arch,
        config.target_patch,
        config.default_batch,
        config.total_epochs,
        scaled_iterations(config.iterations_per_epoch, fraction),
    )


def _make_batch(
    policy: SamplingPolicy,
    train_set: VolumeDataset,
    schedule: CurriculumSchedule,
    stage_idx: int,
    seed: int,
    epoch: int,
    iteration: int,
) -> PatchBatch:
    stage = schedule.stages[stage_idx]
    rng = RngStream(seed).child(epoch, iteration)
    if schedule.uses_resampling:
        batch = assemble_progres_batch(
            train_set, stage, policy, rng, schedule.target_patch, stage_idx
        )
    else:
        batch = assemble_batch(
            policy.batch_strategy, train_set, stage, policy, rng, stage_idx
        )
    if policy.mirror_axes:
        batch = mirror_augment(batch, policy.mirror_axes, rng)
    return batch


def run_training(
    config: ExperimentConfig,
    policy: SamplingPolicy,
    seed: int,
    fraction: int = 100,
    dataset: VolumeDataset | None = None,
):
    """Train one run; returns (params, trace, schedule).

    Stages run in order; each iteration assembles a batch, does a
    forward/backward/update step, and records metrics. Wall time is taken
    per epoch around the training loop only. The run `seed` drives both
    parameter initialization and all sampling streams (it supersedes
    policy.seed, which only matters for sampling outside a training run).
    """
    if dataset is None:
        dataset = resolve_dataset(config)
    train_set, _ = split_dataset(dataset, config.eval_fold)
    schedule = build_run_schedule(config, policy, fraction)
    params = segnet.SegNetParams.initialize(config.net, seed=seed)
    velocity = params.zero_like()
    total_its = schedule.total_iterations
    num_classes = dataset.num_classes

    stage_rec, fg_rec, uniq_rec, vox_rec, loss_rec = [], [], [], [], []
    epoch_seconds, epoch_stage = [], []
    initial_loss = None
    global_it = 0
    global_epoch = 0

    executor = (
        ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    )
    try:
        for stage_idx, stage in enumerate(schedule.stages):
            for _ in range(stage.epochs):
                t0 = time.perf_counter()
                iters = range(stage.iterations_per_epoch)
                make = partial(
                    _make_batch, policy, train_set, schedule, stage_idx, seed,
                    global_epoch,
                )
                if executor is None:
                    batches = map(make, iters)
                else:
                    batches = executor.map(make, iters)
                for batch in batches:
                    images = np.stack([p.image for p in batch.patches])
                    labels = np.stack([p.labels for p in batch.patches])
                    logits, cache = segnet.forward(params, images, want_cache=True)
                    loss, grad_logits = segnet.loss_dice_ce(logits, labels)
                    if initial_loss is None:
                        initial_loss = loss
                    if not math.isfinite(loss) or (
                        initial_loss > 0 and loss > DIVERGENCE_FACTOR * initial_loss
                    ):
                        raise DivergenceError(
                            f"loss {loss!r} diverged at iteration {global_it} "
                            f"(stage {stage_idx}, initial {initial_loss!r})"
                        )
                    grads = segnet.backward(params, cache, grad_logits)
                    lr = segnet.poly_lr(
                        config.base_lr, global_it, total_its, config.lr_power
                    )
                    segnet.sgd_step(params, grads, velocity, lr, config.momentum)
                    stage_rec.append(stage_idx)
                    fg_rec.append(fg_voxel_fraction(batch))
                    uniq_rec.append(unique_class_fraction(batch, num_classes))
                    vox_rec.append(batch.tensor_voxels)
                    loss_rec.append(loss)
                    global_it += 1
                epoch_seconds.append(time.perf_counter() - t0)
                epoch_stage.append(stage_idx)
                global_epoch += 1
    finally:
        if executor is not None:
            executor.shutdown()

    trace = RunTrace(
        stage_index=np.array(stage_rec, dtype=np.int64),
        fg_fraction=np.array(fg_rec, dtype=np.float64),
        unique_class_fraction=np.array(uniq_rec, dtype=np.float64),
        tensor_voxels=np.array(vox_rec, dtype=np.int64),
        loss=np.array(loss_rec, dtype=np.float64),
        epoch_seconds=epoch_seconds,
        epoch_stage=epoch_stage,
    )
    return params, trace, schedule


def evaluate_params(
    params: segnet.SegNetParams,
    held_out: VolumeDataset,
    window,
) -> dict:
    """Sliding-window prediction and mean foreground Dice on held-out volumes."""
    per_volume = {}
    values = []
    for vol in held_out.volumes:
        pred = segnet.sliding_window_predict(params, vol.image, window)
        dice = mean_fg_dice(pred, vol.labels, held_out.num_classes)
        per_volume[vol.patient_id] = dice
        if math.isnan(dice):
            logger.info("volume %r has no evaluable foreground class", vol.patient_id)
        else:
            values.append(dice)
    mean = float(np.mean(values)) if values else float("nan")
    return {"per_volume": per_volume, "mean": mean}


def train_and_evaluate(
    config: ExperimentConfig,
    policy: SamplingPolicy,
    seed: int,
    fraction: int = 100,
    dataset: VolumeDataset | None = None,
):
    """One full run: train, then evaluate at the target window."""
    if dataset is None:
        dataset = resolve_dataset(config)
    params, trace, schedule = run_training(config, policy, seed, fraction, dataset)
    _, held_out = split_dataset(dataset, config.eval_fold)
    result = evaluate_params(params, held_out, config.target_patch)
    return params, trace, schedule, result


def save_run(
    out_dir,
    config: ExperimentConfig,
    policy: SamplingPolicy,
    seed: int,
    fraction: int,
    params: segnet.SegNetParams,
    trace: RunTrace,
    schedule: CurriculumSchedule,
    eval_result: dict | None = None,
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "trace.csv").write_text(trace.to_csv())
    (out_dir / "epochs.csv").write_text(trace.epochs_csv())
    (out_dir / "schedule.json").write_text(schedule.to_json())
    segnet.save_params(params, out_dir / "checkpoint.segn")
    summary = {
        "mode": policy.mode.value,
        "batch_strategy": policy.batch_strategy.value,
        "axis_policy": policy.axis_policy.value,
        "fg_ratio_rule": policy.fg_ratio_rule.value,
        "mirror_axes": list(policy.mirror_axes),
        "seed": seed,
        "fraction": fraction,
        "iterations": trace.iterations,
        "iterated_voxels": trace.iterated_voxels,
        "total_seconds": trace.total_seconds,
        "final_loss": float(trace.loss[-1]) if trace.iterations else None,
        "dice": eval_result,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return out_dir


def _run_name(policy: SamplingPolicy, fraction: int, seed: int) -> str:
    return f"{policy.mode.value}_f{fraction:03d}_s{seed}"


def run_convergence_suite(config: ExperimentConfig, out_dir=None) -> dict:
    """Train every (policy, fraction) pair once and report held-out Dice.

    The averaged-curve normalization divides by the task's maximum
    performance, so the normalized curve peaks at 1.0.
    """
    dataset = resolve_dataset(config)
    rows = []
    for policy in config.policies:
        for fraction in sorted(config.fractions):
            params, trace, schedule, result = train_and_evaluate(
                config, policy, config.seed, fraction, dataset
            )
            row = {
                "mode": policy.mode.value,
                "fraction": fraction,
                "dice": result["mean"],
                "iterated_voxels": trace.iterated_voxels,
                "iterations": trace.iterations,
            }
            rows.append(row)
            if out_dir is not None:
                save_run(
                    Path(out_dir) / _run_name(policy, fraction, config.seed),
                    config, policy, config.seed, fraction, params, trace,
                    schedule, result,
                )
    best = max(row["dice"] for row in rows)
    for row in rows:
        row["normalized_dice"] = row["dice"] / best if best > 0 else float("nan")
    report = {"rows": rows, "task_max_dice": best}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "convergence.json").write_text(json.dumps(report, indent=2))
    return report


def run_variability_suite(config: ExperimentConfig, out_dir=None) -> dict:
    """Repeat each strategy `repeats` times per fraction; report mean, SD and
    triplet win counts over all repeat combinations."""
    if len(config.policies) != 3:
        raise ValueError("variability suite compares exactly 3 strategies")
    dataset = resolve_dataset(config)
    report = {"fractions": {}}
    for fraction in sorted(config.fractions):
        outcomes = {}
        for policy in config.policies:
            dices = []
            for r in range(config.repeats):
                seed = config.seed + r
                params, trace, schedule, result = train_and_evaluate(
                    config, policy, seed, fraction, dataset
                )
                dices.append(result["mean"])
                if out_dir is not None:
                    save_run(
                        Path(out_dir) / _run_name(policy, fraction, seed),
                        config, policy, seed, fraction, params, trace,
                        schedule, result,
                    )
            outcomes[policy.mode.value] = dices
        names = [p.mode.value for p in config.policies]
        wins = triplet_win_counts(*(outcomes[name] for name in names))
        report["fractions"][str(fraction)] = {
            "outcomes": outcomes,
            "mean": {n: float(np.mean(outcomes[n])) for n in names},
            "sd": {
                n: float(np.std(outcomes[n], ddof=1)) if len(outcomes[n]) > 1 else 0.0
                for n in names
            },
            "wins": dict(zip(names, wins)),
            "combinations": int(np.prod([len(outcomes[n]) for n in names])),
        }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "variability.json").write_text(json.dumps(report, indent=2))
    return report
