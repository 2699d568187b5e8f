"""Measurement and statistics: Dice, class-balance metrics, cost accounting,
Wilcoxon signed-rank, Spearman correlation, triplet win counting,
normalized averages and the inter/intra-method SD ratio.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata
from scipy.stats import t as student_t

from .sampler import PatchBatch
from .schedule import CurriculumSchedule

logger = logging.getLogger(__name__)


@dataclass
class RunTrace:
    """Per-iteration metrics plus per-epoch wall times for one training run."""

    stage_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fg_fraction: np.ndarray = field(default_factory=lambda: np.zeros(0))
    unique_class_fraction: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tensor_voxels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    epoch_seconds: list[float] = field(default_factory=list)
    epoch_stage: list[int] = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.tensor_voxels)

    @property
    def epochs(self) -> int:
        return len(self.epoch_seconds)

    @property
    def iterated_voxels(self) -> int:
        return int(self.tensor_voxels.sum())

    @property
    def total_seconds(self) -> float:
        return float(sum(self.epoch_seconds))

    def to_csv(self) -> str:
        lines = ["iteration,stage,fg_fraction,unique_class_fraction,tensor_voxels,loss"]
        for i in range(self.iterations):
            lines.append(
                f"{i},{int(self.stage_index[i])},{float(self.fg_fraction[i])!r},"
                f"{float(self.unique_class_fraction[i])!r},"
                f"{int(self.tensor_voxels[i])},{float(self.loss[i])!r}"
            )
        return "\n".join(lines) + "\n"

    def epochs_csv(self) -> str:
        lines = ["epoch,stage,seconds"]
        for e, (stage, sec) in enumerate(zip(self.epoch_stage, self.epoch_seconds)):
            lines.append(f"{e},{int(stage)},{float(sec)!r}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float
    n: int
    method: str


def fg_voxel_fraction(batch: PatchBatch) -> float:
    """Foreground-labeled voxels over all voxels in the batch."""
    fg = sum(int((p.labels > 0).sum()) for p in batch.patches)
    total = sum(p.labels.size for p in batch.patches)
    return fg / total


def unique_class_fraction(batch: PatchBatch, num_classes: int) -> float:
    """Distinct label ids present (background included) over num_classes."""
    ids = set()
    for p in batch.patches:
        ids.update(np.unique(p.labels).tolist())
    return len(ids) / num_classes


def mean_fg_dice(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    """Dice averaged over foreground classes.

    Classes empty in both prediction and truth are excluded; if every
    foreground class is excluded the result is NaN (undefined).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    dices = []
    for c in range(1, num_classes):
        p = pred == c
        t = truth == c
        np_c = int(p.sum())
        nt_c = int(t.sum())
        if np_c == 0 and nt_c == 0:
            continue
        inter = int(np.logical_and(p, t).sum())
        dices.append(2.0 * inter / (np_c + nt_c))
    if not dices:
        return float("nan")
    return float(np.mean(dices))


def virtual_relative_runtime(trace: RunTrace, schedule: CurriculumSchedule) -> float:
    """Actual training time over the virtual time of an equal-length
    constant-patch-size run, estimated from the max-patch-stage epochs."""
    final_stage = len(schedule.stages) - 1
    final_times = [
        sec for stage, sec in zip(trace.epoch_stage, trace.epoch_seconds)
        if stage == final_stage
    ]
    if not final_times:
        raise ValueError("trace contains no epoch at the maximal patch stage")
    t_cps = float(np.mean(final_times))
    virtual_total = t_cps * trace.epochs
    return trace.total_seconds / virtual_total


def relative_flops(trace: RunTrace, reference: RunTrace) -> float:
    """Iterated voxels relative to a reference trace."""
    return trace.iterated_voxels / reference.iterated_voxels


def _exact_signed_rank_tail(ranks2: np.ndarray, w2: int) -> tuple[float, float]:
    """P(W+ <= w2) and P(W+ >= w2) for doubled integer ranks, by subset-sum
    counting over all 2^n sign assignments."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    upper = 0
    for r in ranks2:
        r = int(r)
        upper += r
        counts[r : upper + 1] += counts[: upper - r + 1].copy()
    denom = counts.sum()
    cdf = counts[: w2 + 1].sum() / denom
    sf = counts[w2:].sum() / denom
    return cdf, sf


def wilcoxon_signed_rank(differences, exact_max_n: int = 20) -> StatResult:
    """Two-sided paired Wilcoxon signed-rank test.

    Zero differences are dropped (logged). For n <= exact_max_n the exact
    null distribution is enumerated (ties midranked); larger n uses the
    normal approximation with tie correction. The statistic is
    min(W+, W-).
    """
    d = np.asarray(differences, dtype=np.float64)
    zeros = int((d == 0).sum())
    if zeros:
        logger.info("wilcoxon: dropping %d zero difference(s)", zeros)
        d = d[d != 0]
    n = len(d)
    if n < 5:
        raise ValueError(f"need >= 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = n * (n + 1) / 2.0 - w_plus
    statistic = min(w_plus, w_minus)
    if n <= exact_max_n:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        w2 = int(round(2.0 * w_plus))
        cdf, sf = _exact_signed_rank_tail(ranks2, w2)
        p = min(1.0, 2.0 * min(cdf, sf))
        return StatResult(statistic=statistic, p_value=p, n=n, method="wilcoxon-exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts**3 - tie_counts) / 48.0).sum())
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = (w_plus - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return StatResult(statistic=statistic, p_value=p, n=n, method="wilcoxon-normal")


def _spearman_rho(rx: np.ndarray, ry: np.ndarray) -> float:
    n = len(rx)
    if len(np.unique(rx)) == n and len(np.unique(ry)) == n:
        d = rx - ry
        return float(1.0 - 6.0 * (d * d).sum() / (n * (n * n - 1)))
    cx = rx - rx.mean()
    cy = ry - ry.mean()
    return float((cx * cy).sum() / math.sqrt((cx * cx).sum() * (cy * cy).sum()))


def spearman(
    x,
    y,
    n_permutations: int = 100_000,
    permutation_max_n: int = 20,
    seed: int = 0,
) -> StatResult:
    """Spearman rank correlation with midranked ties.

    For n <= permutation_max_n the two-sided p-value comes from a seeded
    Monte-Carlo permutation test; larger samples use the t approximation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D with equal length")
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points")
    rx = rankdata(x)
    ry = rankdata(y)
    rho = _spearman_rho(rx, ry)
    if n <= permutation_max_n:
        gen = np.random.default_rng(np.random.SeedSequence((seed, n_permutations)))
        perms = np.tile(ry, (n_permutations, 1))
        perms = gen.permuted(perms, axis=1)
        cx = rx - rx.mean()
        cp = perms - perms.mean(axis=1, keepdims=True)
        denom = math.sqrt(float((cx * cx).sum())) * np.sqrt((cp * cp).sum(axis=1))
        rhos = (cp @ cx) / denom
        hits = int((np.abs(rhos) >= abs(rho) - 1e-12).sum())
        p = (hits + 1) / (n_permutations + 1)
        return StatResult(statistic=rho, p_value=p, n=n, method="spearman-permutation")
    if abs(rho) >= 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * float(student_t.sf(abs(t), n - 2))
    return StatResult(statistic=rho, p_value=p, n=n, method="spearman-t")


def triplet_win_counts(a, b, c) -> tuple[int, int, int]:
    """Wins over all |a|*|b|*|c| outcome combinations; a strategy wins a
    combination only when strictly above both others."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    av = a[:, None, None]
    bv = b[None, :, None]
    cv = c[None, None, :]
    wins_a = int(((av > bv) & (av > cv)).sum())
    wins_b = int(((bv > av) & (bv > cv)).sum())
    wins_c = int(((cv > av) & (cv > bv)).sum())
    return wins_a, wins_b, wins_c


def normalized_average(dice_table, reference_column: int) -> np.ndarray:
    """Per-strategy mean of (value / reference * 100) across datasets.

    dice_table: (datasets, strategies) array.
    """
    table = np.asarray(dice_table, dtype=np.float64)
    ref = table[:, reference_column : reference_column + 1]
    return (table / ref * 100.0).mean(axis=0)


@dataclass(frozen=True)
class InterIntraResult:
    intra_sds: tuple[float, ...]
    avg_intra: float
    inter_sd: float
    ratio: float


def inter_intra_ratio(dice_matrix) -> InterIntraResult:
    """Spread of method differences relative to per-method run spread.

    dice_matrix: (methods, folds). Intra SD is the sample SD across folds
    per method; inter SD is the sample SD across methods within each fold,
    averaged over folds; ratio = inter / mean(intra).
    """
    m = np.asarray(dice_matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
        raise ValueError("need a (methods >= 2, folds >= 2) matrix")
    intra = m.std(axis=1, ddof=1)
    inter = float(m.std(axis=0, ddof=1).mean())
    avg_intra = float(intra.mean())
    return InterIntraResult(
        intra_sds=tuple(float(v) for v in intra),
        avg_intra=avg_intra,
        inter_sd=inter,
        ratio=inter / avg_intra,
    )
