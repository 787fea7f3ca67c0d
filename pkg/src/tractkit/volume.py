"""Voxel-grid data types, masks, and bounding-box ROI extraction.

Conventions
-----------
* ``Volume.data`` is a numpy array indexed ``[x, y, z]`` (3D) or
  ``[x, y, z, c]`` (4D, channels last).  On disk the flat voxel order is
  x-fastest, matching the file format (see :mod:`tractkit.nifti`).
* Volumes are immutable after construction: ``data`` is marked read-only
  so volumes can be shared across parallel workers.
* Bounding boxes store inclusive per-axis voxel index ranges.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SUPPORTED_DTYPES = (np.float32, np.uint8, np.int16)


class VolumeError(Exception):
    """Base class for voxel-grid errors."""


class ShapeMismatch(VolumeError):
    """Grids or patch extents do not agree."""


class EmptyMask(VolumeError):
    """Mask contains no nonzero voxel."""


@dataclass(frozen=True)
class Volume:
    """A 3D or 4D voxel grid with spatial metadata.

    Args:
        data: dense array, shape (nx, ny, nz) or (nx, ny, nz, nc).
        voxel_size: per-axis extent in mm.
        affine: 4x4 voxel-to-world transform (last row 0,0,0,1).
    """

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (3, 4):
            raise ShapeMismatch(f"volume must be 3D or 4D, got {data.ndim}D")
        if any(d <= 0 for d in data.shape):
            raise ShapeMismatch(f"extents must be positive, got {data.shape}")
        if not all(s > 0 for s in self.voxel_size):
            raise VolumeError(f"voxel sizes must be positive, got {self.voxel_size}")
        affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4) or not np.allclose(affine[3], (0, 0, 0, 1)):
            raise VolumeError("affine must be 4x4 with last row (0,0,0,1)")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        affine.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", tuple(float(s) for s in self.voxel_size))
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_channels(self) -> int:
        return 1 if self.data.ndim == 3 else self.data.shape[3]

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.voxel_size))

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same grid, new voxel values."""
        return replace(self, data=data)

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.spatial_dims == other.spatial_dims
            and np.allclose(self.voxel_size, other.voxel_size)
            and np.allclose(self.affine, other.affine)
        )


class Mask(Volume):
    """A Volume whose data is binary {0, 1}, stored as uint8."""

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.isin(data, (0, 1)).all():
            raise VolumeError("mask voxels must be 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8, copy=False))
        super().__post_init__()

    @property
    def n_voxels(self) -> int:
        return int(np.count_nonzero(self.data))


def as_mask(v: Volume) -> Mask:
    """Reinterpret a volume as a binary mask (nonzero -> 1)."""
    return Mask((np.asarray(v.data) != 0).astype(np.uint8),
                voxel_size=v.voxel_size, affine=v.affine)


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive per-axis voxel index ranges."""

    mins: tuple[int, int, int]
    maxs: tuple[int, int, int]

    def __post_init__(self):
        mins = tuple(int(v) for v in self.mins)
        maxs = tuple(int(v) for v in self.maxs)
        if any(lo > hi for lo, hi in zip(mins, maxs)):
            raise VolumeError(f"box min must not exceed max: {mins} > {maxs}")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in zip(self.mins, self.maxs))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.mins, self.maxs))

    def union(self, other: "BoundingBox") -> "BoundingBox":
        return BoundingBox(
            tuple(min(a, b) for a, b in zip(self.mins, other.mins)),
            tuple(max(a, b) for a, b in zip(self.maxs, other.maxs)),
        )

    def expand(self, margin: int) -> "BoundingBox":
        return BoundingBox(tuple(lo - margin for lo in self.mins),
                           tuple(hi + margin for hi in self.maxs))

    def clamp(self, dims: tuple[int, int, int]) -> "BoundingBox":
        return BoundingBox(
            tuple(min(max(lo, 0), d - 1) for lo, d in zip(self.mins, dims)),
            tuple(min(max(hi, 0), d - 1) for hi, d in zip(self.maxs, dims)),
        )

    def contains(self, other: "BoundingBox") -> bool:
        return all(a <= b for a, b in zip(self.mins, other.mins)) and all(
            a >= b for a, b in zip(self.maxs, other.maxs))

    def to_dict(self) -> dict:
        return {"mins": list(self.mins), "maxs": list(self.maxs)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(tuple(d["mins"]), tuple(d["maxs"]))


# Default ROI margin in voxels; tolerates small inter-subject shifts.
DEFAULT_ROI_MARGIN = 2


def bounding_box(m: Mask, margin: int = 0) -> BoundingBox:
    """Tightest box containing all nonzero voxels, expanded and clamped.

    Raises:
        EmptyMask: no nonzero voxel.
    """
    nz = np.nonzero(m.data)
    if nz[0].size == 0:
        raise EmptyMask("mask has no nonzero voxel")
    mins = tuple(int(ax.min()) for ax in nz[:3])
    maxs = tuple(int(ax.max()) for ax in nz[:3])
    return BoundingBox(mins, maxs).expand(margin).clamp(m.spatial_dims)


def max_bounding_box(masks, margin: int = DEFAULT_ROI_MARGIN) -> BoundingBox:
    """Union of per-mask boxes over a training set, then margin + clamp.

    All masks must share grid extents (the clamp uses the first mask's dims).
    """
    masks = list(masks)
    if not masks:
        raise EmptyMask("no masks given")
    box = bounding_box(masks[0], 0)
    for m in masks[1:]:
        box = box.union(bounding_box(m, 0))
    return box.expand(margin).clamp(masks[0].spatial_dims)


def crop(v: Volume, b: BoundingBox) -> Volume:
    """Extract the box region; channels are kept for 4D volumes.

    The cropped affine keeps world coordinates consistent (origin shifted
    to the box corner).
    """
    if not BoundingBox((0, 0, 0), tuple(d - 1 for d in v.spatial_dims)).contains(b):
        raise ShapeMismatch(f"box {b} exceeds volume extents {v.spatial_dims}")
    data = v.data[b.slices()]
    affine = np.array(v.affine)
    affine[:3, 3] = (v.affine @ np.array([*b.mins, 1.0]))[:3]
    cls = Mask if isinstance(v, Mask) else Volume
    return cls(data.copy(), voxel_size=v.voxel_size, affine=affine)


def paste(full: Volume, patch: Volume, b: BoundingBox) -> Volume:
    """Write the patch into the box region; voxels outside are untouched."""
    if patch.spatial_dims != b.shape:
        raise ShapeMismatch(
            f"patch dims {patch.spatial_dims} do not match box dims {b.shape}")
    if patch.data.ndim != full.data.ndim or patch.n_channels != full.n_channels:
        raise ShapeMismatch("patch and full volume channel layout differ")
    if not BoundingBox((0, 0, 0), tuple(d - 1 for d in full.spatial_dims)).contains(b):
        raise ShapeMismatch(f"box {b} exceeds volume extents {full.spatial_dims}")
    data = np.array(full.data)
    data[b.slices()] = patch.data
    cls = Mask if isinstance(full, Mask) else Volume
    return cls(data, voxel_size=full.voxel_size, affine=full.affine)
