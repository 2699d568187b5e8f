"""Patch-size ladders, epoch allocation, batch-size solving and cost math.

The memory budget is modeled as an input-tensor voxel count
(default batch x target patch voxels): training FLOPs scale with the input
tensor, so holding the per-iteration voxel count at or below this budget is
the stand-in for "fits in GPU memory".
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum


class Mode(str, Enum):
    CPS = "CPS"
    PGPS_EFFICIENCY = "PGPS-Efficiency"
    PGPS_PERFORMANCE = "PGPS-Performance"
    PGPS_LEGACY = "PGPS-Legacy"
    PGPSPLUS_LEGACY = "PGPSPlus-Legacy"
    PROGRESSIVE_RESOLUTION = "ProgressiveResolution"


class AxisPolicy(str, Enum):
    LOWEST_VALUE = "LowestValue"
    SEQUENTIAL = "Sequential"


class BatchStrategy(str, Enum):
    SPLIT_CROP = "SplitCrop"
    SINGLE_CROP = "SingleCrop"
    MULTI_CROP = "MultiCrop"
    SINGLE_VOLUME = "SingleVolume"


class FgRatioRule(str, Enum):
    NNUNET_DEFAULT = "NNUNetDefault"
    FIXED50 = "Fixed50"


@dataclass(frozen=True)
class ArchConstraints:
    """Per-axis pooling counts; divisor and minimal patch are 2**pools."""

    pools_per_axis: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(
            self, "pools_per_axis", tuple(int(p) for p in self.pools_per_axis)
        )
        if any(p < 0 for p in self.pools_per_axis):
            raise ValueError(f"pool counts must be >= 0, got {self.pools_per_axis}")

    @property
    def divisors(self) -> tuple[int, int, int]:
        return tuple(2**p for p in self.pools_per_axis)


@dataclass(frozen=True)
class SamplingPolicy:
    """Which sampling strategy a training run uses.

    PGPS-Performance always runs a 50% foreground patch ratio; the nn-default
    rule would jump from 50% to 33% the moment the batch grows past two,
    putting a discontinuity in the class-balance trajectory.
    """

    mode: Mode
    axis_policy: AxisPolicy = AxisPolicy.LOWEST_VALUE
    batch_strategy: BatchStrategy = BatchStrategy.SPLIT_CROP
    fg_ratio_rule: FgRatioRule | None = None
    mirror_axes: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "axis_policy", AxisPolicy(self.axis_policy))
        object.__setattr__(self, "batch_strategy", BatchStrategy(self.batch_strategy))
        rule = self.fg_ratio_rule
        if rule is None:
            rule = (
                FgRatioRule.FIXED50
                if self.mode == Mode.PGPS_PERFORMANCE
                else FgRatioRule.NNUNET_DEFAULT
            )
        rule = FgRatioRule(rule)
        if self.mode == Mode.PGPS_PERFORMANCE and rule != FgRatioRule.FIXED50:
            raise ValueError("PGPS-Performance requires the Fixed50 foreground ratio")
        object.__setattr__(self, "fg_ratio_rule", rule)
        axes = tuple(sorted(set(int(a) for a in self.mirror_axes)))
        if any(a not in (0, 1, 2) for a in axes):
            raise ValueError(f"mirror axes must be within (0, 1, 2), got {axes}")
        object.__setattr__(self, "mirror_axes", axes)


@dataclass(frozen=True)
class StagePlan:
    patch_size: tuple[int, int, int]
    batch_size: int
    epochs: int
    iterations_per_epoch: int

    @property
    def patch_voxels(self) -> int:
        s0, s1, s2 = self.patch_size
        return s0 * s1 * s2

    @property
    def tensor_voxels(self) -> int:
        return self.batch_size * self.patch_voxels


@dataclass(frozen=True)
class CurriculumSchedule:
    mode: Mode
    stages: tuple[StagePlan, ...]
    target_patch: tuple[int, int, int]
    budget_voxels: int
    default_batch: int

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    @property
    def total_iterations(self) -> int:
        return sum(s.epochs * s.iterations_per_epoch for s in self.stages)

    def iterated_voxels(self) -> int:
        """Closed-form total input-tensor voxels over the whole training."""
        return sum(
            s.epochs * s.iterations_per_epoch * s.tensor_voxels for s in self.stages
        )

    @property
    def uses_resampling(self) -> bool:
        return self.mode == Mode.PROGRESSIVE_RESOLUTION

    def to_json(self) -> str:
        doc = {
            "mode": self.mode.value,
            "stages": [
                {
                    "patch": list(s.patch_size),
                    "batch": s.batch_size,
                    "epochs": s.epochs,
                    "iters": s.iterations_per_epoch,
                }
                for s in self.stages
            ],
            "budget_voxels": self.budget_voxels,
            "target": list(self.target_patch),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CurriculumSchedule":
        doc = json.loads(text)
        stages = tuple(
            StagePlan(
                patch_size=tuple(s["patch"]),
                batch_size=int(s["batch"]),
                epochs=int(s["epochs"]),
                iterations_per_epoch=int(s["iters"]),
            )
            for s in doc["stages"]
        )
        return cls(
            mode=Mode(doc["mode"]),
            stages=stages,
            target_patch=tuple(doc["target"]),
            budget_voxels=int(doc["budget_voxels"]),
            default_batch=stages[-1].batch_size,
        )


def min_patch(arch: ArchConstraints) -> tuple[int, int, int]:
    """Smallest processable patch: 2**pools per axis."""
    return arch.divisors


def _validate_target(arch: ArchConstraints, target) -> tuple[int, int, int]:
    target = tuple(int(t) for t in target)
    for axis, (t, d) in enumerate(zip(target, arch.divisors)):
        if t < d:
            raise ValueError(f"target axis {axis} ({t}) below minimal patch {d}")
        if t % d != 0:
            raise ValueError(f"target axis {axis} ({t}) not divisible by {d}")
    return target


def build_ladder(arch: ArchConstraints, target, axis_policy: AxisPolicy):
    """All patch sizes from the minimal patch to the target.

    One axis grows by its divisor per step. LowestValue grows the axis with
    the smallest current size among unfinished axes (ties to the lowest axis
    index); Sequential cycles 0,1,2 skipping finished axes.
    """
    target = _validate_target(arch, target)
    axis_policy = AxisPolicy(axis_policy)
    divisors = arch.divisors
    current = list(min_patch(arch))
    ladder = [tuple(current)]
    cursor = 0
    while tuple(current) != target:
        open_axes = [a for a in range(3) if current[a] < target[a]]
        if axis_policy == AxisPolicy.LOWEST_VALUE:
            axis = min(open_axes, key=lambda a: (current[a], a))
        else:
            while cursor % 3 not in open_axes:
                cursor += 1
            axis = cursor % 3
            cursor += 1
        current[axis] += divisors[axis]
        ladder.append(tuple(current))
    return ladder


def allocate_epochs(total_epochs: int, num_stages: int) -> list[int]:
    """Equal split per stage; the division remainder goes to the final stage."""
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    if total_epochs < num_stages:
        raise ValueError(
            f"total_epochs {total_epochs} < num_stages {num_stages}: every stage needs >= 1 epoch"
        )
    base = total_epochs // num_stages
    epochs = [base] * num_stages
    epochs[-1] += total_epochs - base * num_stages
    return epochs


def budget_voxels(default_batch: int, target_patch) -> int:
    t0, t1, t2 = (int(t) for t in target_patch)
    return int(default_batch) * t0 * t1 * t2


def _patch_voxels(patch) -> int:
    p0, p1, p2 = patch
    return p0 * p1 * p2


def solve_batch_sizes(mode: Mode, ladder, budget: int, default_batch: int) -> list[int]:
    """Per-stage batch sizes for a full ladder."""
    mode = Mode(mode)
    if mode == Mode.PGPS_PERFORMANCE:
        return [
            max(default_batch, budget // _patch_voxels(p)) for p in ladder
        ]
    if mode == Mode.PGPSPLUS_LEGACY:
        # Largest batches with tensor voxels both under budget and
        # non-decreasing along the ladder: walk backward capping each stage
        # at the next stage's tensor size.
        batches = [0] * len(ladder)
        batches[-1] = default_batch
        cap = default_batch * _patch_voxels(ladder[-1])
        for i in range(len(ladder) - 2, -1, -1):
            vox = _patch_voxels(ladder[i])
            batches[i] = max(1, min(budget, cap) // vox)
            cap = batches[i] * vox
        return batches
    return [default_batch] * len(ladder)


def batch_size_for_stage(
    policy: SamplingPolicy,
    stage_patch,
    budget: int,
    default_batch: int,
    ladder=None,
) -> int:
    """Batch size for one stage.

    PGPSPlus-Legacy batches depend on the whole ladder (the monotone-tensor
    constraint couples the stages), so that mode requires `ladder`.
    """
    stage_patch = tuple(int(s) for s in stage_patch)
    if policy.mode == Mode.PGPSPLUS_LEGACY:
        if ladder is None:
            raise ValueError("PGPSPlus-Legacy batch sizes need the full ladder")
        return solve_batch_sizes(policy.mode, ladder, budget, default_batch)[
            list(ladder).index(stage_patch)
        ]
    return solve_batch_sizes(policy.mode, [stage_patch], budget, default_batch)[0]


def _half_up(x: float) -> int:
    return math.floor(x + 0.5)


def fg_patch_count(policy: SamplingPolicy, batch_size: int) -> int:
    """Foreground patches per batch, rounded half-up from the ratio."""
    if policy.fg_ratio_rule == FgRatioRule.FIXED50:
        ratio = 0.5
    else:
        ratio = 0.5 if batch_size == 2 else 1.0 / 3.0
    return _half_up(batch_size * ratio)


def build_schedule(
    policy: SamplingPolicy,
    arch: ArchConstraints,
    target,
    default_batch: int,
    total_epochs: int,
    iterations_per_epoch: int,
) -> CurriculumSchedule:
    """Compose ladder, epoch allocation and batch solving into a schedule.

    CPS is the degenerate single-stage schedule at the target patch.
    ProgressiveResolution reuses the constant-batch ladder tensor sizes but
    its stages resample target-size crops instead of cropping smaller.
    """
    target = _validate_target(arch, target)
    if default_batch < 1:
        raise ValueError("default_batch must be >= 1")
    if iterations_per_epoch < 0:
        # 0 is allowed: it plans a run that touches no data (useful for
        # inspecting schedules and for the empty-training contract).
        raise ValueError("iterations_per_epoch must be >= 0")
    if policy.mode == Mode.CPS:
        ladder = [target]
    else:
        ladder = build_ladder(arch, target, policy.axis_policy)
    budget = budget_voxels(default_batch, target)
    batches = solve_batch_sizes(policy.mode, ladder, budget, default_batch)
    epochs = allocate_epochs(total_epochs, len(ladder))
    stages = tuple(
        StagePlan(
            patch_size=patch,
            batch_size=batch,
            epochs=ep,
            iterations_per_epoch=iterations_per_epoch,
        )
        for patch, batch, ep in zip(ladder, batches, epochs)
    )
    return CurriculumSchedule(
        mode=policy.mode,
        stages=stages,
        target_patch=target,
        budget_voxels=budget,
        default_batch=default_batch,
    )


def expected_relative_flops(
    schedule: CurriculumSchedule, reference: CurriculumSchedule
) -> float:
    """Ratio of total iterated voxels between two equal-length trainings."""
    if schedule.total_iterations != reference.total_iterations:
        raise ValueError(
            "schedules must have equal total iterations: "
            f"{schedule.total_iterations} vs {reference.total_iterations}"
        )
    return schedule.iterated_voxels() / reference.iterated_voxels()
