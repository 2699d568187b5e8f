"""Deterministic synthetic dataset generator.

Volumes contain ellipsoidal foreground objects on a noisy background.
Classes are rasterized in id order, so a higher class id wins where objects
overlap. When a target smallest-class frequency is given, the highest class
id is calibrated: its object radii are solved from the requested voxel
fraction instead of drawn from the radius range.

Directional class pairs are distinguished only by placement: the first
class of a pair lives entirely in the lower half of axis 2, the second in
the upper half, and both share one image intensity. Mirror-flipping such a
volume along axis 2 therefore swaps the two ground-truth identities.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import RngStream
from .volume import Volume, VolumeDataset


@dataclass(frozen=True)
class SynthSpec:
    num_volumes: int
    dims_range: tuple[int, int]
    num_classes: int
    objects_per_class: tuple[int, int] = (1, 3)
    radius_range: tuple[float, float] = (3.0, 6.0)
    smallest_class_frequency: float | None = None
    directional_pairs: tuple[tuple[int, int], ...] = ()
    noise_amplitude: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.num_volumes < 1:
            raise ValueError("num_volumes must be >= 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        lo, hi = self.dims_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad dims_range {self.dims_range}")
        freq = self.smallest_class_frequency
        if freq is not None and not (0.0 < freq < 1.0):
            raise ValueError("smallest_class_frequency must be in (0, 1)")
        for pair in self.directional_pairs:
            a, b = pair
            if not (1 <= a < self.num_classes and 1 <= b < self.num_classes) or a == b:
                raise ValueError(f"bad directional pair {pair}")

    @property
    def calibrated_class(self) -> int | None:
        if self.smallest_class_frequency is None or self.num_classes < 2:
            return None
        return self.num_classes - 1


def _class_intensity(spec: SynthSpec) -> np.ndarray:
    means = np.arange(spec.num_classes, dtype=np.float64)
    for a, b in spec.directional_pairs:
        shared = float(min(a, b))
        means[a] = shared
        means[b] = shared
    return means


def _half_bounds(dims, axis2_half):
    """Inclusive center bounds restricting an object to one axis-2 half."""
    d2 = dims[2]
    if axis2_half == "lower":
        return 0, d2 // 2 - 1
    return (d2 + 1) // 2, d2 - 1


def _place_object(gen, dims, radii, axis2_half=None):
    lows, highs = [], []
    for axis, (d, r) in enumerate(zip(dims, radii)):
        margin = int(math.ceil(r))
        lo, hi = margin, d - 1 - margin
        if axis == 2 and axis2_half is not None:
            hlo, hhi = _half_bounds(dims, axis2_half)
            lo, hi = max(lo, hlo + margin), min(hi, hhi - margin)
        if lo > hi:
            raise ValueError(
                f"object of radius {r:.2f} cannot fit on axis {axis} of dims {dims}"
                + (f" ({axis2_half} half)" if axis == 2 and axis2_half else "")
            )
        lows.append(lo)
        highs.append(hi)
    return tuple(int(gen.integers(lo, hi + 1)) for lo, hi in zip(lows, highs))


def _rasterize_ellipsoid(labels, center, radii, class_id):
    dims = labels.shape
    slices, coords = [], []
    for c, r, d in zip(center, radii, dims):
        lo = max(0, int(math.floor(c - r)))
        hi = min(d - 1, int(math.ceil(c + r)))
        slices.append(slice(lo, hi + 1))
        coords.append((np.arange(lo, hi + 1, dtype=np.float64) - c) / r)
    mask = (
        coords[0][:, None, None] ** 2
        + coords[1][None, :, None] ** 2
        + coords[2][None, None, :] ** 2
    ) <= 1.0
    region = labels[tuple(slices)]
    region[mask] = class_id


def _half_for_class(spec: SynthSpec, class_id: int) -> str | None:
    for a, b in spec.directional_pairs:
        if class_id == a:
            return "lower"
        if class_id == b:
            return "upper"
    return None


def _generate_volume(spec: SynthSpec, index: int) -> Volume:
    gen = RngStream(spec.seed).child(index).generator()
    lo, hi = spec.dims_range
    dims = tuple(int(d) for d in gen.integers(lo, hi + 1, size=3))
    labels = np.zeros(dims, dtype=np.uint16)
    n_lo, n_hi = spec.objects_per_class
    for cid in range(1, spec.num_classes):
        count = int(gen.integers(n_lo, n_hi + 1))
        half = _half_for_class(spec, cid)
        for _ in range(count):
            if cid == spec.calibrated_class:
                wanted = spec.smallest_class_frequency * np.prod(dims) / count
                r = (3.0 * wanted / (4.0 * math.pi)) ** (1.0 / 3.0)
                radii = (r, r, r)
            else:
                r_lo, r_hi = spec.radius_range
                radii = tuple(gen.uniform(r_lo, r_hi) for _ in range(3))
            center = _place_object(gen, dims, radii, half)
            _rasterize_ellipsoid(labels, center, radii, cid)
    intensity = _class_intensity(spec)
    image = intensity[labels] + spec.noise_amplitude * gen.standard_normal(dims)
    # Quantize through the on-disk dtype so RVOL round-trips are bit-exact.
    image = image.astype(np.float32).astype(np.float64)
    return Volume(
        dims=dims,
        spacing=(1.0, 1.0, 1.0),
        image=image,
        labels=labels,
        num_classes=spec.num_classes,
        patient_id=f"synth{index:04d}",
    )


def generate(spec: SynthSpec) -> VolumeDataset:
    """Generate the dataset; identical spec and seed give identical bytes."""
    volumes = [_generate_volume(spec, i) for i in range(spec.num_volumes)]
    return VolumeDataset(volumes=volumes, num_classes=spec.num_classes)


@dataclass(frozen=True)
class TaskCharacteristics:
    num_classes: int
    dataset_size: int
    patch_to_volume_coverage: float
    smallest_class_frequency: float
    has_foreground: bool


def measure_characteristics(dataset: VolumeDataset, patch) -> TaskCharacteristics:
    """Task measures: class count, size, patch coverage, class imbalance.

    Coverage uses the median volume size. The smallest-class frequency is
    the minimum over foreground classes of the per-class voxel fraction
    averaged over volumes; with no foreground anywhere it is reported as 0
    with has_foreground=False.
    """
    patch = tuple(int(p) for p in patch)
    patch_voxels = patch[0] * patch[1] * patch[2]
    sizes = np.array([v.voxels for v in dataset.volumes], dtype=np.float64)
    coverage = patch_voxels / float(np.median(sizes))
    fracs = np.zeros((len(dataset.volumes), dataset.num_classes), dtype=np.float64)
    for i, vol in enumerate(dataset.volumes):
        counts = np.bincount(vol.labels.ravel(), minlength=dataset.num_classes)
        fracs[i] = counts / vol.voxels
    fg = fracs[:, 1:]
    present = fg.sum(axis=0) > 0
    if dataset.num_classes < 2 or not present.any():
        smallest, has_fg = 0.0, False
    else:
        smallest = float(fg.mean(axis=0)[present].min())
        has_fg = True
    return TaskCharacteristics(
        num_classes=dataset.num_classes,
        dataset_size=len(dataset.volumes),
        patch_to_volume_coverage=float(coverage),
        smallest_class_frequency=smallest,
        has_foreground=has_fg,
    )
