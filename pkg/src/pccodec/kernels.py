"""Inner loops of the sparse engine, JIT-compiled when numba is present.

The numpy fallbacks compute the same quantities; they are the readable
reference and keep the package importable without numba. Within one
installation only one path is ever active, so encoder and decoder always
share bit-identical arithmetic.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*a, **k):
        def deco(f):
            return f

        return deco


# ---------------------------------------------------------------------------
# kernel-map construction: per offset, neighbor matching is the intersection
# of the sorted key array with itself shifted by the offset's key delta.

@njit(cache=True)
def _count_pairs(keys, shifts, counts):
    n = keys.shape[0]
    for o in range(shifts.shape[0]):
        d = shifts[o]
        i = 0
        j = 0
        c = 0
        while i < n and j < n:
            t = keys[i] + d
            if keys[j] < t:
                j += 1
            elif keys[j] > t:
                i += 1
            else:
                c += 1
                i += 1
                j += 1
        counts[o] = c


@njit(cache=True)
def _fill_pairs(keys, shifts, off_starts, src, dst):
    n = keys.shape[0]
    for o in range(shifts.shape[0]):
        d = shifts[o]
        w = off_starts[o]
        i = 0
        j = 0
        while i < n and j < n:
            t = keys[i] + d
            if keys[j] < t:
                j += 1
            elif keys[j] > t:
                i += 1
            else:
                src[w] = j
                dst[w] = i
                w += 1
                i += 1
                j += 1


def merge_pairs(keys: np.ndarray, shifts: np.ndarray):
    """(src, dst, off_starts) of all matches keys[src] == keys[dst] + shift."""
    kk = len(shifts)
    if HAVE_NUMBA:
        counts = np.empty(kk, dtype=np.int64)
        _count_pairs(keys, shifts, counts)
        off_starts = np.zeros(kk + 1, dtype=np.int64)
        np.cumsum(counts, out=off_starts[1:])
        src = np.empty(off_starts[-1], dtype=np.int32)
        dst = np.empty(off_starts[-1], dtype=np.int32)
        _fill_pairs(keys, shifts, off_starts, src, dst)
        return src, dst, off_starts
    n = len(keys)
    srcs, dsts, counts = [], [], []
    for d in shifts:
        pos = np.searchsorted(keys, keys + d)
        pos_c = np.minimum(pos, n - 1)
        hit = keys[pos_c] == keys + d
        srcs.append(pos_c[hit].astype(np.int32))
        dsts.append(np.flatnonzero(hit).astype(np.int32))
        counts.append(int(hit.sum()))
    off_starts = np.zeros(kk + 1, dtype=np.int64)
    np.cumsum(np.asarray(counts, np.int64), out=off_starts[1:])
    return np.concatenate(srcs), np.concatenate(dsts), off_starts


# ---------------------------------------------------------------------------
# sparse convolution inner loops. src/dst indices ascend within each offset
# slice, so the in-kernel gathers walk the feature arrays mostly forward.

@njit(fastmath=True, cache=True)
def _conv_fwd_jit(x, wt, src, dst, off_starts, out):
    # wt is (K, cout, cin): both dot streams are contiguous.
    cout = wt.shape[1]
    cin = wt.shape[2]
    for o in range(off_starts.shape[0] - 1):
        for p in range(off_starts[o], off_starts[o + 1]):
            s = src[p]
            d = dst[p]
            for co in range(cout):
                acc = x[s, 0] * wt[o, co, 0]
                for ci in range(1, cin):
                    acc += x[s, ci] * wt[o, co, ci]
                out[d, co] += acc


@njit(fastmath=True, cache=True)
def _conv_bwd_x_jit(g, wv, src, dst, off_starts, gx):
    # wv is (K, cin, cout).
    cin = wv.shape[1]
    cout = wv.shape[2]
    for o in range(off_starts.shape[0] - 1):
        for p in range(off_starts[o], off_starts[o + 1]):
            s = src[p]
            d = dst[p]
            for ci in range(cin):
                acc = g[d, 0] * wv[o, ci, 0]
                for co in range(1, cout):
                    acc += g[d, co] * wv[o, ci, co]
                gx[s, ci] += acc


@njit(fastmath=True, cache=True)
def _conv_bwd_w_jit(x, g, src, dst, off_starts, gw):
    cin = gw.shape[1]
    cout = gw.shape[2]
    for o in range(off_starts.shape[0] - 1):
        for p in range(off_starts[o], off_starts[o + 1]):
            s = src[p]
            d = dst[p]
            for ci in range(cin):
                v = x[s, ci]
                for co in range(cout):
                    gw[o, ci, co] += v * g[d, co]


def conv_forward(x, wv, kmap, out):
    """out[dst] += wv[o]^T x[src] over all pairs; out preallocated (N, cout)."""
    if HAVE_NUMBA:
        wt = np.ascontiguousarray(wv.transpose(0, 2, 1))
        _conv_fwd_jit(x, wt, kmap.src_all, kmap.dst_all, kmap.off_starts, out)
        return
    for o in range(wv.shape[0]):
        sl = kmap.offset_slice(o)
        if sl.stop > sl.start:
            out[kmap.dst_all[sl]] += x[kmap.src_all[sl]] @ wv[o]


def conv_backward(x, g, wv, kmap, gx, gw):
    """Accumulate input and weight gradients; gx may be None to skip."""
    if HAVE_NUMBA:
        if gx is not None:
            _conv_bwd_x_jit(g, wv, kmap.src_all, kmap.dst_all, kmap.off_starts, gx)
        _conv_bwd_w_jit(x, g, kmap.src_all, kmap.dst_all, kmap.off_starts, gw)
        return
    for o in range(wv.shape[0]):
        sl = kmap.offset_slice(o)
        if sl.stop > sl.start:
            s, d = kmap.src_all[sl], kmap.dst_all[sl]
            if gx is not None:
                gx[s] += g[d] @ wv[o].T
            gw[o] = x[s].T @ g[d]
