"""Volume and patch data model, RVOL binary format, and resampling.

Axis layout is row-major with axis 0 slowest everywhere in this package.
Images are stored as float32 on disk and float64 in memory; volumes whose
image values are exactly representable in float32 (everything produced by
the synthetic generator or loaded from disk) round-trip bit-exactly.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

RVOL_MAGIC = b"RVOL"
RVOL_VERSION = 1


class RvolFormatError(ValueError):
    """Raised when an .rvol file violates the on-disk format."""


@dataclass
class Volume:
    """A 3D scalar image with an aligned integer label map.

    image: float64, shape dims, row-major (axis 0 slowest)
    labels: uint16, same shape; 0 is background, ids < num_classes
    spacing: physical voxel size per axis, informational only
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    image: np.ndarray
    labels: np.ndarray
    num_classes: int
    patient_id: str = ""
    _fg_indices: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be >= 1 per axis, got {self.dims}")
        self.image = np.ascontiguousarray(self.image, dtype=np.float64).reshape(self.dims)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint16).reshape(self.dims)
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError(
                f"label id {int(self.labels.max())} >= num_classes {self.num_classes}"
            )

    @property
    def voxels(self) -> int:
        d0, d1, d2 = self.dims
        return d0 * d1 * d2

    def foreground_classes(self) -> list[int]:
        """Sorted foreground class ids with at least one voxel."""
        return sorted(self.foreground_index().keys())

    def foreground_index(self) -> dict[int, np.ndarray]:
        """class id -> flat voxel indices; built lazily and cached.

        The build is idempotent, so a benign rebuild race under threads
        cannot change the result.
        """
        if self._fg_indices is None:
            flat = self.labels.ravel()
            index = {}
            for cid in np.unique(flat):
                if cid == 0:
                    continue
                index[int(cid)] = np.flatnonzero(flat == cid)
            self._fg_indices = index
        return self._fg_indices


@dataclass
class Patch:
    """A single training crop with provenance.

    kind is "foreground" or "random"; fg_class is the class a foreground
    patch was required to contain (None for random patches).
    """

    size: tuple[int, int, int]
    origin: tuple[int, int, int]
    image: np.ndarray
    labels: np.ndarray
    patient_id: str
    kind: str = "random"
    fg_class: int | None = None

    @property
    def is_foreground(self) -> bool:
        return self.kind == "foreground"


def crop(volume: Volume, origin, size) -> Patch:
    """Crop a patch; regions past the far bounds are zero/background padded.

    origin must be >= 0 per axis. A crop fully inside bounds copies
    verbatim; otherwise missing image voxels are 0.0 and missing labels are
    background (0).
    """
    origin = tuple(int(o) for o in origin)
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ValueError(f"crop size must be >= 1 per axis, got {size}")
    if any(o < 0 for o in origin):
        raise ValueError(f"crop origin must be >= 0, got {origin}")
    img = np.zeros(size, dtype=np.float64)
    lab = np.zeros(size, dtype=np.uint16)
    src = []
    dst = []
    for o, s, d in zip(origin, size, volume.dims):
        take = max(0, min(o + s, d) - o)
        src.append(slice(o, o + take))
        dst.append(slice(0, take))
    if all(sl.stop > sl.start for sl in dst):
        img[tuple(dst)] = volume.image[tuple(src)]
        lab[tuple(dst)] = volume.labels[tuple(src)]
    return Patch(
        size=size,
        origin=origin,
        image=img,
        labels=lab,
        patient_id=volume.patient_id,
    )


def resample_image_trilinear(image: np.ndarray, new_dims) -> np.ndarray:
    """Trilinear resampling with corner-aligned coordinates."""
    new_dims = tuple(int(d) for d in new_dims)
    if any(d < 1 for d in new_dims):
        raise ValueError(f"new dims must be >= 1 per axis, got {new_dims}")
    image = np.ascontiguousarray(image, dtype=np.float64)
    if new_dims == image.shape:
        return image.copy()
    return kernels.trilinear_resample(image, new_dims)


def resample_labels_nearest(labels: np.ndarray, new_dims) -> np.ndarray:
    """Nearest-neighbor label resampling under the same coordinate mapping."""
    new_dims = tuple(int(d) for d in new_dims)
    if any(d < 1 for d in new_dims):
        raise ValueError(f"new dims must be >= 1 per axis, got {new_dims}")
    labels = np.ascontiguousarray(labels)
    if new_dims == labels.shape:
        return labels.copy()
    return kernels.nearest_resample(labels, new_dims)


_HEADER = struct.Struct("<4sHH3I3f")


def write_volume(volume: Volume, path) -> None:
    path = Path(path)
    header = _HEADER.pack(
        RVOL_MAGIC,
        RVOL_VERSION,
        volume.num_classes,
        *volume.dims,
        *(np.float32(s) for s in volume.spacing),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(volume.image.astype("<f4").tobytes())
        fh.write(volume.labels.astype("<u2").tobytes())


def read_volume(path, patient_id: str | None = None) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise RvolFormatError(f"{path}: truncated header")
    magic, version, num_classes, d0, d1, d2, s0, s1, s2 = _HEADER.unpack_from(raw)
    if magic != RVOL_MAGIC:
        raise RvolFormatError(f"{path}: bad magic {magic!r}")
    if version != RVOL_VERSION:
        raise RvolFormatError(f"{path}: unsupported version {version}")
    n = d0 * d1 * d2
    need = _HEADER.size + 4 * n + 2 * n
    if len(raw) != need:
        raise RvolFormatError(f"{path}: payload is {len(raw)} bytes, expected {need}")
    off = _HEADER.size
    image = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64)
    off += 4 * n
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).copy()
    if n and int(labels.max()) >= num_classes:
        raise RvolFormatError(
            f"{path}: label id {int(labels.max())} >= num_classes {num_classes}"
        )
    return Volume(
        dims=(d0, d1, d2),
        spacing=(float(s0), float(s1), float(s2)),
        image=image,
        labels=labels,
        num_classes=num_classes,
        patient_id=patient_id if patient_id is not None else path.stem,
    )


@dataclass
class VolumeDataset:
    volumes: list[Volume]
    num_classes: int

    def __len__(self) -> int:
        return len(self.volumes)


MANIFEST_NAME = "manifest.json"


def write_dataset(dataset: VolumeDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, vol in enumerate(dataset.volumes):
        name = f"{vol.patient_id or f'vol{i:04d}'}.rvol"
        write_volume(vol, directory / name)
        names.append(name)
    manifest = {"num_classes": dataset.num_classes, "volumes": names}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2))


def load_dataset(directory) -> VolumeDataset:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    volumes = [read_volume(directory / name) for name in manifest["volumes"]]
    num_classes = int(manifest["num_classes"])
    for vol in volumes:
        if vol.num_classes != num_classes:
            raise RvolFormatError(
                f"{vol.patient_id}: num_classes {vol.num_classes} != manifest {num_classes}"
            )
    return VolumeDataset(volumes=volumes, num_classes=num_classes)
