"""Statistics oracles: Dice, runtime/FLOPs accounting, Wilcoxon, Spearman,
triplet wins, normalized averages, inter/intra SD ratio."""

import itertools
import math

import numpy as np
import pytest

import benchmark_tables as tables
from pgps.sampler import PatchBatch
from pgps.schedule import (
    ArchConstraints,
    Mode,
    SamplingPolicy,
    build_schedule,
)
from pgps.stats import (
    RunTrace,
    StatResult,
    fg_voxel_fraction,
    inter_intra_ratio,
    mean_fg_dice,
    normalized_average,
    relative_flops,
    spearman,
    triplet_win_counts,
    unique_class_fraction,
    virtual_relative_runtime,
    wilcoxon_signed_rank,
)
from pgps.volume import Patch


def make_patch(labels):
    labels = np.asarray(labels, dtype=np.uint16)
    return Patch(
        size=labels.shape,
        origin=(0, 0, 0),
        image=np.zeros(labels.shape),
        labels=labels,
        patient_id="p",
    )


def make_batch(label_arrays):
    patches = [make_patch(a) for a in label_arrays]
    vox = sum(p.labels.size for p in patches)
    return PatchBatch(patches=patches, stage_index=0, tensor_voxels=vox)


def test_fg_voxel_fraction_examples():
    zeros = np.zeros((2, 2, 2))
    assert fg_voxel_fraction(make_batch([zeros, zeros])) == 0.0
    assert fg_voxel_fraction(make_batch([np.ones((1, 1, 1)), np.zeros((1, 1, 1))])) == 0.5
    gen = np.random.default_rng(0)
    arrays = [gen.integers(0, 3, size=(3, 4, 2)) for _ in range(3)]
    got = fg_voxel_fraction(make_batch(arrays))
    want = sum(int((a > 0).sum()) for a in arrays) / sum(a.size for a in arrays)
    assert got == want


def test_unique_class_fraction_examples():
    full = np.arange(14).reshape(14, 1, 1)
    assert unique_class_fraction(make_batch([full]), 14) == 1.0
    assert unique_class_fraction(make_batch([np.zeros((2, 2, 2))]), 4) == 0.25
    arrays = [np.array([[[0, 3]]]), np.array([[[5, 0]]])]
    assert unique_class_fraction(make_batch(arrays), 14) == 3 / 14


def test_mean_fg_dice_examples():
    gen = np.random.default_rng(1)
    labels = gen.integers(0, 4, size=(4, 4, 4))
    assert mean_fg_dice(labels, labels, 4) == 1.0
    a = np.zeros((2, 2, 2), dtype=int)
    b = np.zeros((2, 2, 2), dtype=int)
    a[0, 0, 0] = 1
    b[1, 1, 1] = 1
    assert mean_fg_dice(a, b, 2) == 0.0
    # |P| = |T| = 4 with overlap 2 -> 0.5
    p = np.zeros(16, dtype=int)
    t = np.zeros(16, dtype=int)
    p[:4] = 1
    t[2:6] = 1
    assert mean_fg_dice(p.reshape(4, 2, 2), t.reshape(4, 2, 2), 2) == 0.5


def test_mean_fg_dice_skips_classes_empty_in_both():
    pred = np.zeros((2, 2, 2), dtype=int)
    truth = np.zeros((2, 2, 2), dtype=int)
    pred[0, 0, 0] = 1
    truth[0, 0, 0] = 1
    # class 2 appears nowhere: excluded, so the mean is class 1's Dice
    assert mean_fg_dice(pred, truth, 3) == 1.0
    assert math.isnan(mean_fg_dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), 3))


def test_mean_fg_dice_invariant_under_consistent_relabeling():
    gen = np.random.default_rng(2)
    pred = gen.integers(0, 4, size=(5, 5, 5))
    truth = gen.integers(0, 4, size=(5, 5, 5))
    base = mean_fg_dice(pred, truth, 4)
    perm = {0: 0, 1: 3, 2: 1, 3: 2}
    relabel = np.vectorize(perm.get)
    assert mean_fg_dice(relabel(pred), relabel(truth), 4) == pytest.approx(base, abs=1e-12)


def _trace(epoch_stage, epoch_seconds, tensor_voxels=()):
    n = len(tensor_voxels)
    return RunTrace(
        stage_index=np.zeros(n, dtype=np.int64),
        fg_fraction=np.zeros(n),
        unique_class_fraction=np.zeros(n),
        tensor_voxels=np.asarray(tensor_voxels, dtype=np.int64),
        loss=np.zeros(n),
        epoch_seconds=list(epoch_seconds),
        epoch_stage=list(epoch_stage),
    )


def test_virtual_relative_runtime_examples():
    arch = ArchConstraints((1, 1, 1))
    cps = build_schedule(SamplingPolicy(mode=Mode.CPS), arch, (4, 4, 4), 2, 3, 1)
    trace = _trace([0, 0, 0], [2.0, 2.0, 2.0])
    assert virtual_relative_runtime(trace, cps) == 1.0
    two_stage = build_schedule(
        SamplingPolicy(mode=Mode.PGPS_EFFICIENCY), arch, (2, 2, 4), 2, 2, 1
    )
    assert len(two_stage.stages) == 2
    trace = _trace([0, 1], [1.0, 4.0])
    assert virtual_relative_runtime(trace, two_stage) == pytest.approx(0.625)
    with pytest.raises(ValueError):
        virtual_relative_runtime(_trace([0, 0], [1.0, 1.0]), two_stage)


def test_relative_flops_is_voxel_ratio():
    a = _trace([0], [1.0], tensor_voxels=[10, 20, 30])
    b = _trace([0], [1.0], tensor_voxels=[60, 60])
    assert relative_flops(a, b) == 0.5
    assert relative_flops(a, a) == 1.0


def wilcoxon_brute_force(diffs):
    """Exact two-sided p by full enumeration over sign assignments."""
    from scipy.stats import rankdata

    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    n = len(d)
    ranks = rankdata(np.abs(d))
    w_obs = ranks[d > 0].sum()
    sums = []
    for signs in itertools.product((0, 1), repeat=n):
        sums.append(sum(r for s, r in zip(signs, ranks) if s))
    sums = np.asarray(sums)
    eps = 1e-9
    cdf = np.mean(sums <= w_obs + eps)
    sf = np.mean(sums >= w_obs - eps)
    return min(1.0, 2.0 * min(cdf, sf))


def test_wilcoxon_all_positive_minimal_p():
    gen = np.random.default_rng(3)
    d = gen.uniform(0.1, 5.0, size=15)
    res = wilcoxon_signed_rank(d)
    assert res.statistic == 0.0
    assert res.p_value == pytest.approx(2.0 / 2**15, rel=1e-12)
    assert res.method == "wilcoxon-exact"


def test_wilcoxon_symmetric_differences():
    d = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0]
    res = wilcoxon_signed_rank(d)
    assert res.p_value == 1.0


def test_wilcoxon_matches_enumeration_oracle():
    gen = np.random.default_rng(4)
    for n in (5, 8, 11):
        for _ in range(5):
            d = np.round(gen.normal(size=n), 2)
            d[d == 0] = 0.07
            res = wilcoxon_signed_rank(d)
            assert res.p_value == pytest.approx(wilcoxon_brute_force(d), abs=1e-12)


def test_wilcoxon_handles_ties_in_exact_mode():
    d = np.array([0.5, 0.5, -0.5, 1.0, 1.0, 2.0, -1.0])
    res = wilcoxon_signed_rank(d)
    assert res.p_value == pytest.approx(wilcoxon_brute_force(d), abs=1e-12)


def test_wilcoxon_drops_zeros_and_enforces_minimum():
    res = wilcoxon_signed_rank([0.0, 1.0, 2.0, -1.5, 0.5, -0.25, 0.0])
    assert res.n == 5
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([0.0, 0.0, 1.0, 2.0, 3.0, -1.0])


def test_wilcoxon_normal_approximation_for_large_n():
    gen = np.random.default_rng(5)
    d = gen.normal(loc=0.3, size=40)
    res = wilcoxon_signed_rank(d)
    assert res.method == "wilcoxon-normal"
    assert 0.0 <= res.p_value <= 1.0


def test_wilcoxon_published_pairs():
    res = wilcoxon_signed_rank(tables.PERF_MINUS_CPS)
    assert res.p_value == pytest.approx(2.0 / 2**15, rel=1e-12)
    res = wilcoxon_signed_rank(tables.REL_DELTA_EFF)
    assert res.p_value == pytest.approx(0.6788, abs=0.001)


def test_spearman_monotone_extremes():
    x = np.arange(10.0)
    up = spearman(x, x**3 + 2)
    assert up.statistic == 1.0
    assert up.p_value < 0.01
    down = spearman(x, -x)
    assert down.statistic == -1.0


def test_spearman_tied_example_matches_rank_formula():
    x = [1.0, 2.0, 2.0, 3.0, 4.0]
    y = [10.0, 9.0, 11.0, 11.0, 14.0]
    from scipy.stats import rankdata

    rx, ry = rankdata(x), rankdata(y)
    cx, cy = rx - rx.mean(), ry - ry.mean()
    want = float((cx * cy).sum() / np.sqrt((cx * cx).sum() * (cy * cy).sum()))
    res = spearman(x, y)
    assert res.statistic == pytest.approx(want, abs=1e-12)


def test_spearman_invariant_under_monotone_transforms():
    gen = np.random.default_rng(6)
    x = gen.normal(size=12)
    y = gen.normal(size=12)
    base = spearman(x, y)
    warped = spearman(np.exp(x), y**3)
    assert warped.statistic == pytest.approx(base.statistic, abs=1e-12)
    assert warped.p_value == base.p_value


def test_spearman_permutation_p_is_deterministic():
    gen = np.random.default_rng(7)
    x = gen.normal(size=9)
    y = gen.normal(size=9)
    a = spearman(x, y)
    b = spearman(x, y)
    assert a == b
    assert a.method == "spearman-permutation"


def test_triplet_win_counts_examples():
    a = [5.0] * 5
    b = [1.0] * 5
    c = [2.0] * 5
    assert triplet_win_counts(a, b, c) == (125, 0, 0)
    same = [3.0] * 5
    assert triplet_win_counts(same, same, same) == (0, 0, 0)


def test_triplet_win_counts_matches_brute_force():
    gen = np.random.default_rng(8)
    a, b, c = gen.normal(size=(3, 5))
    wins = [0, 0, 0]
    for x in a:
        for y in b:
            for z in c:
                if x > y and x > z:
                    wins[0] += 1
                elif y > x and y > z:
                    wins[1] += 1
                elif z > x and z > y:
                    wins[2] += 1
    assert triplet_win_counts(a, b, c) == tuple(wins)
    assert sum(wins) <= 125


def test_normalized_average_reference_is_100():
    table = np.column_stack([tables.DICE_CPS, tables.DICE_PGPS_EFF])
    out = normalized_average(table, 0)
    assert out[0] == pytest.approx(100.0, abs=1e-12)


def test_normalized_average_published_values():
    table = np.column_stack(
        [tables.DICE_CPS, tables.DICE_PGPS_EFF, tables.DICE_PGPS_PERF]
    )
    out = normalized_average(table, 0)
    assert out[1] == pytest.approx(100.47, abs=0.01)
    assert out[2] == pytest.approx(101.26, abs=0.01)


def test_inter_intra_ratio_identical_methods():
    m = np.tile(np.array([1.0, 2.0, 3.0, 4.0, 5.0]), (3, 1))
    res = inter_intra_ratio(m)
    assert res.inter_sd == 0.0
    assert res.ratio == 0.0


def test_inter_intra_ratio_matches_direct_formula():
    gen = np.random.default_rng(9)
    m = gen.normal(size=(4, 5))
    res = inter_intra_ratio(m)
    intra = [np.std(m[i], ddof=1) for i in range(4)]
    inter = np.mean([np.std(m[:, f], ddof=1) for f in range(5)])
    assert res.avg_intra == pytest.approx(np.mean(intra), abs=1e-12)
    assert res.inter_sd == pytest.approx(inter, abs=1e-12)
    assert res.ratio == pytest.approx(inter / np.mean(intra), abs=1e-12)


def test_inter_intra_ratio_published_summary():
    res = inter_intra_ratio(tables.BACKBONE_FOLD_DICE)
    assert [round(v, 2) for v in res.intra_sds] == [2.24, 2.09, 2.52, 2.20]
    assert round(res.avg_intra, 2) == 2.27
    assert round(res.inter_sd, 2) == 0.74
    assert res.ratio * 100 == pytest.approx(32.6, abs=0.1)
