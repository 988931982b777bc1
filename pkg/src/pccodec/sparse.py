"""Sparse voxel tensors and the scale pyramid."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coords as C


@dataclass
class SparseTensor:
    """A set of occupied voxels with one feature row per voxel.

    coords are canonical (lexicographic, unique); feats is float32 with
    shape (len(coords), channels). scale is the number of bits per axis of
    the grid this tensor lives on.
    """

    scale: int
    coords: np.ndarray
    feats: np.ndarray

    def __post_init__(self):
        self.coords = C.as_coords(self.coords)
        self.feats = np.asarray(self.feats, dtype=np.float32)
        if self.feats.ndim != 2:
            raise ValueError("feats must be 2-D")
        if len(self.feats) != len(self.coords):
            raise ValueError(
                f"feats rows ({len(self.feats)}) != coords rows ({len(self.coords)})"
            )

    @property
    def n_points(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def validate(self) -> None:
        if not C.is_canonical(self.coords):
            raise ValueError("coords not in canonical order or not unique")
        if self.coords.size and self.coords.min() < 0:
            raise ValueError("negative coordinates")
        if self.coords.size and self.coords.max() >= (1 << self.scale):
            raise ValueError(f"coordinates exceed 2^{self.scale} grid")

    @classmethod
    def from_unsorted(cls, scale, coords, feats) -> "SparseTensor":
        coords = C.as_coords(coords)
        keys = C.pack(coords)
        order = np.argsort(keys, kind="stable")
        if len(keys) and np.any(keys[order][1:] == keys[order][:-1]):
            raise ValueError("duplicate coordinates")
        return cls(scale, coords[order], np.asarray(feats, np.float32)[order])

    @classmethod
    def occupancy(cls, scale, coords) -> "SparseTensor":
        """All-ones single-channel features on the given coordinates."""
        coords = C.as_coords(coords)
        return cls(scale, coords, np.ones((len(coords), 1), np.float32))


def prune(t: SparseTensor, keep: np.ndarray) -> SparseTensor:
    """Restrict t to the rows whose coordinate is in keep (order preserved).

    keep must be a subset of t.coords; anything else signals a wiring bug
    upstream and raises.
    """
    keep = C.as_coords(keep)
    rows = C.find_rows(t.coords, keep)
    if np.any(rows < 0):
        missing = keep[rows < 0][0]
        raise ValueError(f"prune: coordinate {tuple(int(v) for v in missing)} not in tensor")
    rows = np.sort(rows)
    return SparseTensor(t.scale, t.coords[rows], t.feats[rows])


@dataclass
class ScalePyramid:
    """Occupancy chain from a coarse base level to the full-depth cloud.

    levels[i] are canonical coordinates at scale base_scale + i, and
    levels[i] == downsample(levels[i+1]) for every adjacent pair.
    """

    depth: int
    levels: list = field(default_factory=list)

    @property
    def counts(self) -> list:
        return [len(lv) for lv in self.levels]

    @property
    def base_scale(self) -> int:
        return self.depth - (len(self.levels) - 1)

    def scale_of(self, index: int) -> int:
        return self.base_scale + index


def build_pyramid(cloud: np.ndarray, depth: int, base_max_points: int = 64) -> ScalePyramid:
    """Downsample the cloud until the coarsest level has <= base_max_points."""
    cloud = C.canonicalize(cloud)
    if len(cloud) == 0:
        raise ValueError("cannot build a pyramid from an empty cloud")
    if cloud.max() >= (1 << depth):
        raise ValueError(f"cloud does not fit a depth-{depth} grid")
    levels = [cloud]
    while len(levels[-1]) > base_max_points:
        levels.append(C.downsample(levels[-1]))
    levels.reverse()
    return ScalePyramid(depth=depth, levels=levels)
