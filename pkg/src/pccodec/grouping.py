"""Stage assignment of candidate child voxels.

Each candidate child is classified by its octant (position within the parent
cell, 3 bits) and its parent's parity class (parent coordinate mod 2, 3
bits). A GroupingScheme maps the 64 (octant, parity) cells onto 8 coding
stages; stages are coded strictly in order, so earlier stages become context
for later ones.

The default scheme is uneven and spatially non-sequential: one octant is
split across the first three stages by parent parity (so the hardest,
context-free voxels form a small first stage), and the remaining seven
octants are merged pairwise into the last five stages in an alternating
spatial order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import coords as C


@dataclass(frozen=True)
class GroupingScheme:
    name: str
    stage_of: np.ndarray  # (8 octants, 8 parity classes) -> stage in 1..8
    group_of: np.ndarray  # (9,) stage -> reporting group in 1..6; index 0 unused

    def validate(self) -> None:
        if self.stage_of.shape != (8, 8):
            raise ValueError("stage_of must be 8x8")
        if self.stage_of.min() < 1 or self.stage_of.max() > 8:
            raise ValueError("stages must lie in 1..8")
        if self.group_of.shape != (9,):
            raise ValueError("group_of must have 9 entries")

    def stage_count(self) -> int:
        return int(self.stage_of.max())

    def to_arrays(self):
        return self.stage_of.astype(np.int32), self.group_of.astype(np.int32)


def default_scheme() -> GroupingScheme:
    """Uneven, non-sequential 8-stage partition.

    Octant 0 is split by parent parity into stages 1-3 (group 1); the other
    octants form stages 4-8 (groups 2-6): stage 4 = octant 7, stage 5 =
    octants {3, 5}, stage 6 = octant 6, stage 7 = octants {1, 2}, stage 8 =
    octant 4.
    """
    stage_of = np.zeros((8, 8), dtype=np.int32)
    parity_stage = {0: 1, 7: 1, 3: 2, 4: 2, 6: 2, 1: 2, 5: 3, 2: 3}
    for q in range(8):
        stage_of[0, q] = parity_stage[q]
    for o, stage in ((7, 4), (3, 5), (5, 5), (6, 6), (1, 7), (2, 7), (4, 8)):
        stage_of[o, :] = stage
    group_of = np.array([0, 1, 1, 1, 2, 3, 4, 5, 6], dtype=np.int32)
    s = GroupingScheme("uneven", stage_of, group_of)
    s.validate()
    return s


def uniform_sequential_scheme() -> GroupingScheme:
    """Ablation: one octant per stage, visited in octant index order.

    Group labels are reporting metadata only; the 6-group structure of the
    default scheme does not apply here.
    """
    stage_of = np.repeat(np.arange(1, 9, dtype=np.int32)[:, None], 8, axis=1)
    group_of = np.array([0, 1, 2, 3, 4, 5, 6, 6, 6], dtype=np.int32)
    s = GroupingScheme("uniform-sequential", stage_of, group_of)
    s.validate()
    return s


def scheme_from_arrays(name: str, stage_of, group_of) -> GroupingScheme:
    s = GroupingScheme(
        name,
        np.asarray(stage_of, np.int32).reshape(8, 8),
        np.asarray(group_of, np.int32).reshape(9),
    )
    s.validate()
    return s


def assign_stages(ppov: np.ndarray, scheme: GroupingScheme) -> np.ndarray:
    """Stage label (1..8) per candidate coordinate."""
    if len(ppov) == 0:
        return np.empty(0, dtype=np.int32)
    return scheme.stage_of[C.octant_index(ppov), C.parent_parity(ppov)]
