"""Batch assembly: foreground/random patch sampling, the four batching
strategies, mirror augmentation, and resampling-based batches.

Foreground patches are centered on a uniformly chosen voxel of a uniformly
chosen foreground class, with the origin clamped so the crop stays maximally
in bounds (padding only when the volume is smaller than the patch).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .rng import SLOT_MIRROR, SLOT_PATCH, SLOT_PATIENTS, RngStream
from .schedule import BatchStrategy, SamplingPolicy, StagePlan, fg_patch_count
from .volume import (
    Patch,
    Volume,
    VolumeDataset,
    crop,
    resample_image_trilinear,
    resample_labels_nearest,
)

logger = logging.getLogger(__name__)


class NoForegroundError(ValueError):
    """Volume has no foreground voxel to center a foreground patch on."""


@dataclass
class PatchBatch:
    patches: list[Patch]
    stage_index: int
    tensor_voxels: int


def _clamped_origin(center, size, dims):
    origin = []
    for c, s, d in zip(center, size, dims):
        if d < s:
            origin.append(0)
        else:
            origin.append(min(max(c - s // 2, 0), d - s))
    return tuple(origin)


def sample_fg_patch(volume: Volume, patch_size, rng: RngStream) -> Patch:
    """Foreground patch: uniform class among classes present, uniform voxel."""
    index = volume.foreground_index()
    classes = sorted(index.keys())
    if not classes:
        raise NoForegroundError(f"volume {volume.patient_id!r} has no foreground")
    gen = rng.generator()
    cid = classes[int(gen.integers(len(classes)))]
    flat = index[cid]
    voxel = np.unravel_index(int(flat[int(gen.integers(len(flat)))]), volume.dims)
    origin = _clamped_origin(voxel, patch_size, volume.dims)
    patch = crop(volume, origin, patch_size)
    patch.kind = "foreground"
    patch.fg_class = cid
    return patch


def sample_random_patch(volume: Volume, patch_size, rng: RngStream) -> Patch:
    """Random patch with origin uniform over all in-bounds origins."""
    gen = rng.generator()
    origin = tuple(
        int(gen.integers(d - s + 1)) if d >= s else 0
        for d, s in zip(volume.dims, patch_size)
    )
    return crop(volume, origin, patch_size)


def _pick_two_distinct(gen: np.random.Generator, n: int) -> tuple[int, int]:
    a = int(gen.integers(n))
    b = int(gen.integers(n - 1))
    if b >= a:
        b += 1
    return a, b


def _draw_patch(volume, size, rng, want_fg):
    if want_fg:
        try:
            return sample_fg_patch(volume, size, rng)
        except NoForegroundError:
            logger.info(
                "volume %r has no foreground; degraded to a random patch",
                volume.patient_id,
            )
    return sample_random_patch(volume, size, rng)


def assemble_batch(
    strategy: BatchStrategy,
    dataset: VolumeDataset,
    stage: StagePlan,
    policy: SamplingPolicy,
    rng: RngStream,
    stage_index: int = 0,
) -> PatchBatch:
    """Build one training batch; `rng` must already be scoped to the
    (epoch, iteration) being assembled.

    Foreground patches come first in the batch. SplitCrop draws all
    foreground patches from patient A and all random ones from patient B;
    MultiCrop splits both kinds between A and B (A takes the odd one out);
    SingleVolume uses one patient for everything; SingleCrop uses one patch
    per patient, distinct patients when the dataset is large enough.
    """
    strategy = BatchStrategy(strategy)
    volumes = dataset.volumes
    if not volumes:
        raise ValueError("dataset is empty")
    batch = stage.batch_size
    size = stage.patch_size
    n_fg = fg_patch_count(policy, batch)
    n_rand = batch - n_fg
    gen = rng.child(SLOT_PATIENTS).generator()

    if strategy in (BatchStrategy.SPLIT_CROP, BatchStrategy.MULTI_CROP):
        if len(volumes) < 2:
            raise ValueError(f"{strategy.value} needs at least 2 volumes")
        ia, ib = _pick_two_distinct(gen, len(volumes))
        if strategy == BatchStrategy.SPLIT_CROP:
            fg_sources = [volumes[ia]] * n_fg
            rand_sources = [volumes[ib]] * n_rand
        else:
            fg_a = math.ceil(n_fg / 2)
            rand_a = math.ceil(n_rand / 2)
            fg_sources = [volumes[ia]] * fg_a + [volumes[ib]] * (n_fg - fg_a)
            rand_sources = [volumes[ia]] * rand_a + [volumes[ib]] * (n_rand - rand_a)
    elif strategy == BatchStrategy.SINGLE_VOLUME:
        iv = int(gen.integers(len(volumes)))
        fg_sources = [volumes[iv]] * n_fg
        rand_sources = [volumes[iv]] * n_rand
    else:  # SingleCrop
        if len(volumes) >= batch:
            ids = gen.choice(len(volumes), size=batch, replace=False)
        else:
            ids = gen.integers(len(volumes), size=batch)
        sources = [volumes[int(i)] for i in ids]
        fg_sources = sources[:n_fg]
        rand_sources = sources[n_fg:]

    patches = []
    for slot, vol in enumerate(fg_sources + rand_sources):
        patches.append(
            _draw_patch(vol, size, rng.child(SLOT_PATCH, slot), want_fg=slot < n_fg)
        )
    return PatchBatch(
        patches=patches,
        stage_index=stage_index,
        tensor_voxels=batch * stage.patch_voxels,
    )


def mirror_augment(batch: PatchBatch, mirror_axes, rng: RngStream) -> PatchBatch:
    """Flip each patch along each enabled axis independently with p=0.5."""
    axes = tuple(sorted(set(int(a) for a in mirror_axes)))
    if not axes:
        return batch
    flipped = []
    for slot, patch in enumerate(batch.patches):
        gen = rng.child(SLOT_MIRROR, slot).generator()
        image, labels = patch.image, patch.labels
        for axis in axes:
            if gen.random() < 0.5:
                image = np.flip(image, axis=axis)
                labels = np.flip(labels, axis=axis)
        flipped.append(
            Patch(
                size=patch.size,
                origin=patch.origin,
                image=np.ascontiguousarray(image),
                labels=np.ascontiguousarray(labels),
                patient_id=patch.patient_id,
                kind=patch.kind,
                fg_class=patch.fg_class,
            )
        )
    return PatchBatch(
        patches=flipped, stage_index=batch.stage_index, tensor_voxels=batch.tensor_voxels
    )


def assemble_progres_batch(
    dataset: VolumeDataset,
    stage: StagePlan,
    policy: SamplingPolicy,
    rng: RngStream,
    target_patch,
    stage_index: int = 0,
) -> PatchBatch:
    """Progressive-Resolution batch: crop at the target patch size, then
    resample down to the stage size (trilinear image, nearest labels).

    The foreground/random provenance refers to the source crop; nearest
    resampling can drop the sampled class from a very small stage patch.
    """
    target_patch = tuple(int(t) for t in target_patch)
    full_stage = StagePlan(
        patch_size=target_patch,
        batch_size=stage.batch_size,
        epochs=stage.epochs,
        iterations_per_epoch=stage.iterations_per_epoch,
    )
    batch = assemble_batch(
        policy.batch_strategy, dataset, full_stage, policy, rng, stage_index
    )
    size = tuple(stage.patch_size)
    if size == target_patch:
        return PatchBatch(
            patches=batch.patches,
            stage_index=stage_index,
            tensor_voxels=stage.batch_size * stage.patch_voxels,
        )
    resampled = [
        Patch(
            size=size,
            origin=p.origin,
            image=resample_image_trilinear(p.image, size),
            labels=resample_labels_nearest(p.labels, size),
            patient_id=p.patient_id,
            kind=p.kind,
            fg_class=p.fg_class,
        )
        for p in batch.patches
    ]
    return PatchBatch(
        patches=resampled,
        stage_index=stage_index,
        tensor_voxels=stage.batch_size * stage.patch_voxels,
    )
