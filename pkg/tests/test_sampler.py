"""Patch sampling, batch strategies, mirroring, resampled batches."""

import numpy as np
import pytest

from pgps.rng import RngStream
from pgps.sampler import (
    NoForegroundError,
    assemble_batch,
    assemble_progres_batch,
    mirror_augment,
    sample_fg_patch,
    sample_random_patch,
)
from pgps.schedule import BatchStrategy, Mode, SamplingPolicy, StagePlan
from pgps.volume import Volume, VolumeDataset


def make_volume(dims, labels=None, num_classes=3, patient_id="p0", seed=0):
    gen = np.random.default_rng(seed)
    image = gen.normal(size=dims)
    if labels is None:
        labels = gen.integers(0, num_classes, size=dims)
    return Volume(
        dims=dims,
        spacing=(1.0, 1.0, 1.0),
        image=image,
        labels=np.asarray(labels, dtype=np.uint16),
        num_classes=num_classes,
        patient_id=patient_id,
    )


def make_dataset(n=4, dims=(8, 8, 8), num_classes=3):
    vols = [
        make_volume(dims, num_classes=num_classes, patient_id=f"p{i}", seed=i)
        for i in range(n)
    ]
    return VolumeDataset(volumes=vols, num_classes=num_classes)


def stage(patch, batch):
    return StagePlan(patch_size=patch, batch_size=batch, epochs=1, iterations_per_epoch=1)


def test_fg_patch_on_uniform_volume_is_whole_volume():
    labels = np.ones((4, 4, 4))
    vol = make_volume((4, 4, 4), labels=labels, num_classes=2)
    patch = sample_fg_patch(vol, (4, 4, 4), RngStream(0))
    assert patch.kind == "foreground"
    assert patch.fg_class == 1
    assert patch.origin == (0, 0, 0)
    np.testing.assert_array_equal(patch.image, vol.image)


def test_fg_patch_centers_on_single_voxel():
    labels = np.zeros((7, 7, 7))
    labels[3, 3, 3] = 2
    vol = make_volume((7, 7, 7), labels=labels)
    patch = sample_fg_patch(vol, (3, 3, 3), RngStream(1))
    assert patch.origin == (2, 2, 2)
    assert patch.fg_class == 2
    assert (patch.labels == 2).sum() == 1


def test_fg_patch_always_contains_its_class():
    gen = np.random.default_rng(2)
    labels = np.zeros((9, 6, 7))
    for cid in (1, 2):
        for _ in range(3):
            z, y, x = (int(gen.integers(d)) for d in labels.shape)
            labels[z, y, x] = cid
    vol = make_volume((9, 6, 7), labels=labels)
    for i in range(200):
        for size in [(2, 2, 2), (4, 4, 4), (9, 6, 7), (16, 16, 16)]:
            patch = sample_fg_patch(vol, size, RngStream(3).child(i))
            assert (patch.labels == patch.fg_class).sum() >= 1


def test_fg_patch_class_choice_is_uniform():
    # one class has 200x more voxels than the other
    labels = np.zeros((10, 10, 10))
    labels[:2] = 1
    labels[5, 5, 5] = 2
    vol = make_volume((10, 10, 10), labels=labels)
    picks = []
    for i in range(10_000):
        patch = sample_fg_patch(vol, (2, 2, 2), RngStream(4).child(i))
        picks.append(patch.fg_class)
    frac_class_2 = np.mean(np.asarray(picks) == 2)
    assert abs(frac_class_2 - 0.5) < 0.02


def test_fg_patch_without_foreground_raises():
    vol = make_volume((4, 4, 4), labels=np.zeros((4, 4, 4)))
    with pytest.raises(NoForegroundError):
        sample_fg_patch(vol, (2, 2, 2), RngStream(5))


def test_random_patch_uniform_origins():
    vol = make_volume((2, 1, 1))
    counts = {0: 0, 1: 0}
    for i in range(10_000):
        patch = sample_random_patch(vol, (1, 1, 1), RngStream(6).child(i))
        counts[patch.origin[0]] += 1
    assert abs(counts[0] / 10_000 - 0.5) < 0.02


def test_random_patch_forced_cases():
    vol = make_volume((4, 4, 4))
    patch = sample_random_patch(vol, (4, 4, 4), RngStream(7))
    assert patch.origin == (0, 0, 0)
    patch = sample_random_patch(vol, (6, 6, 6), RngStream(8))
    assert patch.origin == (0, 0, 0)
    # padded region is background
    assert (patch.labels[4:] == 0).all()
    assert (patch.image[4:] == 0.0).all()


def test_split_crop_batch_structure():
    ds = make_dataset(4)
    policy = SamplingPolicy(mode=Mode.CPS)
    batch = assemble_batch(
        BatchStrategy.SPLIT_CROP, ds, stage((4, 4, 4), 2), policy, RngStream(9)
    )
    assert len(batch.patches) == 2
    fg, rand = batch.patches
    assert fg.kind == "foreground" and rand.kind == "random"
    assert fg.patient_id != rand.patient_id
    assert batch.tensor_voxels == 2 * 64


def test_split_crop_fixed50_counts():
    ds = make_dataset(4)
    policy = SamplingPolicy(mode=Mode.PGPS_PERFORMANCE)
    batch = assemble_batch(
        BatchStrategy.SPLIT_CROP, ds, stage((4, 4, 4), 6), policy, RngStream(10)
    )
    kinds = [p.kind for p in batch.patches]
    assert kinds == ["foreground"] * 3 + ["random"] * 3
    fg_ids = {p.patient_id for p in batch.patches[:3]}
    rand_ids = {p.patient_id for p in batch.patches[3:]}
    assert len(fg_ids) == 1 and len(rand_ids) == 1
    assert fg_ids != rand_ids


def test_multi_crop_splits_between_two_patients():
    ds = make_dataset(4)
    policy = SamplingPolicy(mode=Mode.PGPS_PERFORMANCE)
    batch = assemble_batch(
        BatchStrategy.MULTI_CROP, ds, stage((4, 4, 4), 5), policy, RngStream(11)
    )
    # fixed50 on batch 5 -> 3 fg (A gets 2, B gets 1), 2 random (A 1, B 1)
    fg = batch.patches[:3]
    rand = batch.patches[3:]
    ids = sorted({p.patient_id for p in batch.patches})
    assert len(ids) == 2
    a_id = fg[0].patient_id
    assert [p.patient_id for p in fg].count(a_id) == 2
    assert [p.patient_id for p in rand].count(a_id) == 1


def test_single_volume_uses_one_patient():
    ds = make_dataset(4)
    policy = SamplingPolicy(mode=Mode.PGPS_PERFORMANCE)
    batch = assemble_batch(
        BatchStrategy.SINGLE_VOLUME, ds, stage((4, 4, 4), 4), policy, RngStream(12)
    )
    assert len({p.patient_id for p in batch.patches}) == 1


def test_single_crop_distinct_patients_when_possible():
    ds = make_dataset(6)
    policy = SamplingPolicy(mode=Mode.PGPS_PERFORMANCE)
    batch = assemble_batch(
        BatchStrategy.SINGLE_CROP, ds, stage((4, 4, 4), 6), policy, RngStream(13)
    )
    ids = [p.patient_id for p in batch.patches]
    assert len(set(ids)) == 6
    assert [p.kind for p in batch.patches] == ["foreground"] * 3 + ["random"] * 3


def test_single_crop_with_replacement_on_small_dataset():
    ds = make_dataset(2)
    policy = SamplingPolicy(mode=Mode.PGPS_PERFORMANCE)
    batch = assemble_batch(
        BatchStrategy.SINGLE_CROP, ds, stage((4, 4, 4), 8), policy, RngStream(14)
    )
    assert len(batch.patches) == 8


def test_two_patient_strategies_need_two_volumes():
    ds = make_dataset(1)
    policy = SamplingPolicy(mode=Mode.CPS)
    for strategy in (BatchStrategy.SPLIT_CROP, BatchStrategy.MULTI_CROP):
        with pytest.raises(ValueError):
            assemble_batch(strategy, ds, stage((4, 4, 4), 2), policy, RngStream(15))


def test_fg_degrades_to_random_on_empty_volume():
    vols = [
        make_volume((6, 6, 6), labels=np.zeros((6, 6, 6)), patient_id=f"p{i}", seed=i)
        for i in range(2)
    ]
    ds = VolumeDataset(volumes=vols, num_classes=3)
    policy = SamplingPolicy(mode=Mode.CPS)
    batch = assemble_batch(
        BatchStrategy.SPLIT_CROP, ds, stage((4, 4, 4), 2), policy, RngStream(16)
    )
    assert [p.kind for p in batch.patches] == ["random", "random"]


def test_batch_assembly_is_deterministic():
    ds = make_dataset(5)
    policy = SamplingPolicy(mode=Mode.PGPS_PERFORMANCE)
    a = assemble_batch(BatchStrategy.SPLIT_CROP, ds, stage((4, 4, 4), 6), policy,
                       RngStream(17).child(3, 9))
    b = assemble_batch(BatchStrategy.SPLIT_CROP, ds, stage((4, 4, 4), 6), policy,
                       RngStream(17).child(3, 9))
    for pa, pb in zip(a.patches, b.patches):
        assert pa.origin == pb.origin
        assert pa.patient_id == pb.patient_id
        np.testing.assert_array_equal(pa.image, pb.image)
        np.testing.assert_array_equal(pa.labels, pb.labels)


def test_mirror_augment_empty_axes_is_identity():
    ds = make_dataset(3)
    policy = SamplingPolicy(mode=Mode.CPS)
    batch = assemble_batch(BatchStrategy.SPLIT_CROP, ds, stage((4, 4, 4), 2), policy,
                           RngStream(18))
    out = mirror_augment(batch, (), RngStream(18))
    assert out is batch


def test_mirror_double_flip_is_identity():
    gen = np.random.default_rng(19)
    img = gen.normal(size=(3, 4, 5))
    flipped_twice = np.flip(np.flip(img, axis=1), axis=1)
    np.testing.assert_array_equal(flipped_twice, img)


def test_mirror_flip_statistics():
    ds = make_dataset(3, dims=(4, 4, 4))
    policy = SamplingPolicy(mode=Mode.CPS)
    flips = 0
    total = 0
    for i in range(5000):
        rng = RngStream(20).child(0, i)
        batch = assemble_batch(BatchStrategy.SPLIT_CROP, ds, stage((3, 3, 3), 2),
                               policy, rng)
        out = mirror_augment(batch, (1,), rng)
        for before, after in zip(batch.patches, out.patches):
            was_flipped = not np.array_equal(before.image, after.image)
            expect = np.flip(before.image, axis=1)
            if was_flipped:
                np.testing.assert_array_equal(after.image, expect)
                np.testing.assert_array_equal(after.labels, np.flip(before.labels, axis=1))
                flips += 1
            total += 1
    assert abs(flips / total - 0.5) < 0.02


def test_progres_batch_final_stage_equals_plain_batch():
    ds = make_dataset(4, dims=(10, 10, 10))
    policy = SamplingPolicy(mode=Mode.PROGRESSIVE_RESOLUTION)
    st = stage((8, 8, 8), 2)
    rng = RngStream(21).child(0, 0)
    plain = assemble_batch(BatchStrategy.SPLIT_CROP, ds, st, policy, rng)
    pr = assemble_progres_batch(ds, st, policy, rng, (8, 8, 8))
    for a, b in zip(plain.patches, pr.patches):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_progres_batch_constant_volume_stays_constant():
    vols = [
        Volume(
            dims=(8, 8, 8),
            spacing=(1, 1, 1),
            image=np.full((8, 8, 8), 2.5),
            labels=np.ones((8, 8, 8), dtype=np.uint16),
            num_classes=2,
            patient_id=f"p{i}",
        )
        for i in range(2)
    ]
    ds = VolumeDataset(volumes=vols, num_classes=2)
    policy = SamplingPolicy(mode=Mode.PROGRESSIVE_RESOLUTION)
    batch = assemble_progres_batch(ds, stage((4, 4, 4), 2), policy,
                                   RngStream(22), (8, 8, 8))
    for p in batch.patches:
        assert p.size == (4, 4, 4)
        np.testing.assert_allclose(p.image, 2.5, atol=1e-12)


def test_progres_batch_label_alphabet_never_grows():
    ds = make_dataset(4, dims=(12, 12, 12), num_classes=4)
    policy = SamplingPolicy(mode=Mode.PROGRESSIVE_RESOLUTION)
    for i in range(30):
        rng = RngStream(23).child(0, i)
        st = stage((4, 8, 4), 2)
        full = assemble_batch(BatchStrategy.SPLIT_CROP, ds, stage((12, 12, 12), 2),
                              policy, rng)
        small = assemble_progres_batch(ds, st, policy, rng, (12, 12, 12))
        for a, b in zip(full.patches, small.patches):
            assert set(np.unique(b.labels)) <= set(np.unique(a.labels))
        assert small.tensor_voxels == 2 * 4 * 8 * 4


def test_fg_fraction_decreases_with_patch_size():
    # small objects: bigger patches dilute the centered foreground
    gen = np.random.default_rng(24)
    vols = []
    for i in range(4):
        labels = np.zeros((16, 16, 16))
        for _ in range(2):
            z, y, x = (int(gen.integers(2, 14)) for _ in range(3))
            labels[z - 1 : z + 1, y - 1 : y + 1, x - 1 : x + 1] = 1
        vols.append(make_volume((16, 16, 16), labels=labels, num_classes=2,
                                patient_id=f"p{i}", seed=i))
    ds = VolumeDataset(volumes=vols, num_classes=2)
    policy = SamplingPolicy(mode=Mode.CPS)
    from pgps.stats import fg_voxel_fraction

    means = []
    for size in [(4, 4, 4), (8, 8, 8), (16, 16, 16)]:
        vals = [
            fg_voxel_fraction(
                assemble_batch(BatchStrategy.SPLIT_CROP, ds, stage(size, 2), policy,
                               RngStream(25).child(0, i))
            )
            for i in range(400)
        ]
        means.append(np.mean(vals))
    assert means[0] > means[1] > means[2]
