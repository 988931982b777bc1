"""Coordinate-level primitives for sparse voxel grids.

Coordinates are (N, 3) int32 arrays of non-negative voxel indices. The
canonical order everywhere in the codec is lexicographic (x, then y, then z),
which coincides with ascending order of the packed 63-bit keys below. All
functions here are pure; none mutate their inputs.
"""

from __future__ import annotations

import numpy as np

# 21 bits per axis: large enough for depth-12 content plus kernel offsets,
# and keeps packed keys positive in int64.
PACK_BITS = 21
MAX_DEPTH = 12

_EMPTY_COORDS = np.empty((0, 3), dtype=np.int32)


def empty_coords() -> np.ndarray:
    return _EMPTY_COORDS.copy()


def as_coords(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.int32)
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"coordinate array must be (N, 3), got {a.shape}")
    return a


def pack(coords: np.ndarray) -> np.ndarray:
    """Pack (N,3) coords into int64 keys whose order is lexicographic."""
    c = coords.astype(np.int64)
    return (c[:, 0] << (2 * PACK_BITS)) | (c[:, 1] << PACK_BITS) | c[:, 2]


def unpack(keys: np.ndarray) -> np.ndarray:
    mask = (1 << PACK_BITS) - 1
    out = np.empty((len(keys), 3), dtype=np.int32)
    out[:, 0] = keys >> (2 * PACK_BITS)
    out[:, 1] = (keys >> PACK_BITS) & mask
    out[:, 2] = keys & mask
    return out


def canonicalize(coords: np.ndarray) -> np.ndarray:
    """Sort lexicographically and drop duplicates."""
    coords = as_coords(coords)
    if len(coords) == 0:
        return empty_coords()
    keys = np.unique(pack(coords))
    return unpack(keys)


def is_canonical(coords: np.ndarray) -> bool:
    if len(coords) == 0:
        return True
    keys = pack(coords)
    return bool(np.all(keys[1:] > keys[:-1]))


def downsample(coords: np.ndarray) -> np.ndarray:
    """Parent coordinates one scale coarser: floor(c/2), deduplicated."""
    if len(coords) == 0:
        return empty_coords()
    return unpack(np.unique(pack(coords >> 1)))


OCTANT_OFFSETS = np.array(
    [[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=np.int32
)


def expand_children(parents: np.ndarray, depth: int | None = None) -> np.ndarray:
    """All 8 children 2p+o of each parent, in canonical order.

    Children of distinct parents never collide, so the result has exactly
    8 * len(parents) rows. If depth is given, coordinates reaching 2**depth
    are rejected.
    """
    if len(parents) == 0:
        return empty_coords()
    children = (parents[:, None, :] * 2 + OCTANT_OFFSETS[None, :, :]).reshape(-1, 3)
    if depth is not None and children.max() >= (1 << depth):
        raise ValueError(f"children exceed 2^{depth} grid")
    keys = np.sort(pack(children))
    return unpack(keys)


def octant_index(coords: np.ndarray) -> np.ndarray:
    """Child position within its parent cell, as 3 bits (x<<2 | y<<1 | z)."""
    c = coords & 1
    return (c[:, 0] << 2) | (c[:, 1] << 1) | c[:, 2]


def parent_parity(coords: np.ndarray) -> np.ndarray:
    """Parity class of the parent cell, as 3 bits (same packing as octants)."""
    p = (coords >> 1) & 1
    return (p[:, 0] << 2) | (p[:, 1] << 1) | p[:, 2]


def find_rows(coords: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Row index of each query in a canonical coords array, -1 if absent."""
    if len(queries) == 0:
        return np.empty(0, dtype=np.int64)
    if len(coords) == 0:
        return np.full(len(queries), -1, dtype=np.int64)
    keys = pack(coords)
    qk = pack(queries)
    pos = np.searchsorted(keys, qk)
    pos_c = np.minimum(pos, len(keys) - 1)
    hit = keys[pos_c] == qk
    return np.where(hit, pos_c, -1)


def contains(coords: np.ndarray, queries: np.ndarray) -> np.ndarray:
    return find_rows(coords, queries) >= 0


def kernel_offsets(k: int) -> np.ndarray:
    """All (dx,dy,dz) in [-r, r]^3 in lexicographic order; K = k^3 rows."""
    r = k // 2
    span = np.arange(-r, r + 1, dtype=np.int32)
    return np.stack(np.meshgrid(span, span, span, indexing="ij"), axis=-1).reshape(-1, 3)


class KernelMap:
    """Gather plan for a same-coordinate-set sparse convolution.

    Pairs are stored offset-major in flat arrays: pair p couples input point
    src_all[p] to output point dst_all[p] at the kernel offset whose slice
    (off_starts) contains p; within an offset, dst is ascending. Built once
    per (coordinate set, k) and reused by every conv on those coordinates.
    """

    __slots__ = ("k", "n_points", "src_all", "dst_all", "off_starts", "pair_count")

    def __init__(self, k, n_points, src_all, dst_all, off_starts):
        self.k = k
        self.n_points = n_points
        self.src_all = src_all
        self.dst_all = dst_all
        self.off_starts = off_starts
        self.pair_count = int(len(src_all))

    def offset_slice(self, o: int) -> slice:
        return slice(int(self.off_starts[o]), int(self.off_starts[o + 1]))

    @property
    def src(self):
        return [self.src_all[self.offset_slice(o)] for o in range(len(self.off_starts) - 1)]

    @property
    def dst(self):
        return [self.dst_all[self.offset_slice(o)] for o in range(len(self.off_starts) - 1)]


def offset_key_shifts(k: int) -> np.ndarray:
    """Packed-key delta of each kernel offset.

    pack(c + d) == pack(c) + shift(d) whenever c + d has non-negative
    in-range components; out-of-range sums corrupt a higher field and can
    never collide with a real key (coords stay far below 2^PACK_BITS), so
    shifted-key equality is exactly neighbor matching.
    """
    off = kernel_offsets(k).astype(np.int64)
    return (off[:, 0] << (2 * PACK_BITS)) + (off[:, 1] << PACK_BITS) + off[:, 2]


def build_kernel_map(coords: np.ndarray, k: int) -> KernelMap:
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    n = len(coords)
    kk = k ** 3
    if n == 0:
        e = np.empty(0, dtype=np.int32)
        return KernelMap(k, 0, e, e, np.zeros(kk + 1, np.int64))
    from .kernels import merge_pairs

    keys = pack(coords)
    src_all, dst_all, off_starts = merge_pairs(keys, offset_key_shifts(k))
    return KernelMap(k, n, src_all, dst_all, off_starts)


def kernel_gather(coords: np.ndarray, k: int) -> list[list[tuple[int, int]]]:
    """Per-point neighbor lists of (offset_index, point_index) pairs.

    Convenience view of build_kernel_map; the self offset is always present.
    """
    km = build_kernel_map(coords, k)
    lists: list[list[tuple[int, int]]] = [[] for _ in range(len(coords))]
    for o in range(k ** 3):
        for s, d in zip(km.src[o], km.dst[o]):
            lists[int(d)].append((o, int(s)))
    return lists


def build_child_map(parents: np.ndarray) -> np.ndarray:
    """(N, 8) row indices of each parent's children in expand_children order.

    Because children of distinct parents are distinct, this is a bijection
    onto range(8N).
    """
    n = len(parents)
    if n == 0:
        return np.empty((0, 8), dtype=np.int64)
    children = (parents[:, None, :] * 2 + OCTANT_OFFSETS[None, :, :]).reshape(-1, 3)
    keys = pack(children)
    order = np.argsort(keys, kind="stable")
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return inv.reshape(n, 8)


def build_stride2_map(fine: np.ndarray, coarse: np.ndarray):
    """Gather plan for a k=2, s=2 downsampling conv.

    Returns per-octant (src, dst): coarse point dst[o][i] receives fine point
    src[o][i] = 2*coarse + o. coarse must equal downsample(fine).
    """
    src, dst = [], []
    fine_keys = pack(fine)
    nc = len(coarse)
    for o in range(8):
        q = coarse * 2 + OCTANT_OFFSETS[o]
        qk = pack(q)
        pos = np.searchsorted(fine_keys, qk)
        pos_c = np.minimum(pos, max(len(fine) - 1, 0))
        hit = (fine_keys[pos_c] == qk) if len(fine) else np.zeros(nc, bool)
        src.append(pos_c[hit].astype(np.int64))
        dst.append(np.arange(nc, dtype=np.int64)[hit])
    return src, dst
