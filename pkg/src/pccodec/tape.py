"""Reverse-mode autodiff over a fixed set of numpy primitives.

This is a flat tape, not a general graph engine: nodes are appended in
creation order (already topological) and backward() walks the list in
reverse. Values are numpy arrays; float32 for training, float64 when a
caller (e.g. the finite-difference checker) wants extra precision.

Multiply-accumulate counting for complexity reports hooks into the matmul-
bearing primitives; it is off unless a MacCounter context is active.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

LN2 = math.log(2.0)


class MacCounter:
    """Accumulates multiply-accumulate counts; `dynamic` covers DSC ops."""

    def __init__(self):
        self.total = 0
        self.dynamic = 0


_mac_counter: MacCounter | None = None
_in_dynamic_scope = False


@contextmanager
def count_macs(counter: MacCounter):
    global _mac_counter
    prev = _mac_counter
    _mac_counter = counter
    try:
        yield counter
    finally:
        _mac_counter = prev


@contextmanager
def dynamic_scope():
    """Marks enclosed ops as belonging to a dynamic (conditionally-executed) block."""
    global _in_dynamic_scope
    prev = _in_dynamic_scope
    _in_dynamic_scope = True
    try:
        yield
    finally:
        _in_dynamic_scope = prev


def _add_macs(n: int):
    if _mac_counter is not None:
        _mac_counter.total += n
        if _in_dynamic_scope:
            _mac_counter.dynamic += n


class Node:
    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def var(self, value) -> Node:
        node = Node(np.asarray(value))
        self.nodes.append(node)
        return node

    def _emit(self, value, parents, vjp) -> Node:
        node = Node(value, parents, vjp)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node):
        """Accumulate d(loss)/d(node) into .grad for every reachable node."""
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, g in zip(node.parents, node.vjp(node.grad)):
                if parent is None or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, s in enumerate(shape):
        if s == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(tape, a, b, out, da, db):
    av, bv = _val(a), _val(b)
    an = a if isinstance(a, Node) else None
    bn = b if isinstance(b, Node) else None

    def vjp(g):
        return (
            _unbroadcast(da(g), av.shape) if an is not None else None,
            _unbroadcast(db(g), bv.shape) if bn is not None else None,
        )

    return tape._emit(out, (an, bn), vjp)


def add(tape, a, b):
    return _binary(tape, a, b, _val(a) + _val(b), lambda g: g, lambda g: g)


def sub(tape, a, b):
    return _binary(tape, a, b, _val(a) - _val(b), lambda g: g, lambda g: -g)


def mul(tape, a, b):
    av, bv = _val(a), _val(b)
    return _binary(tape, a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def reciprocal(tape, a):
    v = 1.0 / a.value
    return tape._emit(v, (a,), lambda g: (-g * v * v,))


def neg(tape, a):
    return tape._emit(-a.value, (a,), lambda g: (-g,))


def relu(tape, a):
    mask = a.value > 0
    return tape._emit(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(tape, a):
    v = 1.0 / (1.0 + np.exp(-a.value))
    return tape._emit(v, (a,), lambda g: (g * v * (1.0 - v),))


def tanh(tape, a):
    v = np.tanh(a.value)
    return tape._emit(v, (a,), lambda g: (g * (1.0 - v * v),))


def softplus(tape, a):
    v = np.logaddexp(0.0, a.value)
    s = 1.0 / (1.0 + np.exp(-a.value))
    return tape._emit(v, (a,), lambda g: (g * s,))


def exp(tape, a):
    v = np.exp(a.value)
    return tape._emit(v, (a,), lambda g: (g * v,))


def log(tape, a):
    v = np.log(a.value)
    av = a.value
    return tape._emit(v, (a,), lambda g: (g / av,))


def clip_min(tape, a, lo: float):
    mask = a.value >= lo
    return tape._emit(np.maximum(a.value, lo), (a,), lambda g: (g * mask,))


def reshape(tape, a, shape):
    old = a.value.shape
    return tape._emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat_cols(tape, parts):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=1)
    widths = [v.shape[1] for v in vals]
    splits = np.cumsum(widths)[:-1]
    nodes = tuple(p if isinstance(p, Node) else None for p in parts)

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return tape._emit(out, nodes, vjp)


def sum_all(tape, a):
    return tape._emit(
        np.asarray(a.value.sum(), dtype=a.value.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.value.shape).copy() if np.ndim(g) == 0 else g * np.ones_like(a.value),),
    )


def gather_rows(tape, a, idx):
    idx = np.asarray(idx, dtype=np.int64)
    out = a.value[idx]
    shape = a.value.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=g.dtype)
        ga[idx] = g  # idx rows are unique by construction
        return (ga,)

    return tape._emit(out, (a,), vjp)


def row_patch(tape, base, idx, rows):
    """Copy of base with rows at idx replaced by `rows`."""
    idx = np.asarray(idx, dtype=np.int64)
    out = base.value.copy()
    out[idx] = _val(rows)
    rn = rows if isinstance(rows, Node) else None

    def vjp(g):
        gb = g.copy()
        gb[idx] = 0
        return (gb, g[idx] if rn is not None else None)

    return tape._emit(out, (base, rn), vjp)


def matmul(tape, a, b):
    av, bv = _val(a), _val(b)
    _add_macs(av.shape[0] * av.shape[1] * bv.shape[1])
    return _binary(tape, a, b, av @ bv, lambda g: g @ bv.T, lambda g: av.T @ g)


def dense(tape, x, w, b=None):
    """x @ w + b; a 1x1x1 convolution over a sparse tensor's features."""
    xv, wv = _val(x), _val(w)
    _add_macs(xv.shape[0] * wv.shape[0] * wv.shape[1])
    out = xv @ wv
    if b is not None:
        out = out + _val(b)
    xn = x if isinstance(x, Node) else None
    bn = b if isinstance(b, Node) else None

    def vjp(g):
        return (
            g @ wv.T if xn is not None else None,
            xv.T @ g,
            g.sum(axis=0) if bn is not None else None,
        )

    return tape._emit(out, (xn, w, bn), vjp)


def channel_matmul(tape, x, m):
    """Per-channel affine core: einsum('ncf,cgf->ncg', x, m)."""
    xv, mv = _val(x), _val(m)
    _add_macs(xv.shape[0] * mv.shape[0] * mv.shape[1] * mv.shape[2])
    out = np.einsum("ncf,cgf->ncg", xv, mv)

    def vjp(g):
        gx = np.einsum("ncg,cgf->ncf", g, mv)
        gm = np.einsum("ncg,ncf->cgf", g, xv)
        return (gx, gm)

    return tape._emit(out, (x, m), vjp)


def sparse_conv(tape, x, w, b, kmap):
    """Same-coordinate-set sparse convolution.

    w has shape (K, C_in, C_out) over the kernel offsets of kmap; out[i] =
    b + sum over occupied neighbors j at offset o of w[o]^T . x[j].
    """
    from . import kernels

    xv, wv = _val(x), _val(w)
    n = kmap.n_points
    _, c_in, c_out = wv.shape
    _add_macs(kmap.pair_count * c_in * c_out)
    xn = x if isinstance(x, Node) else None
    bn = b if isinstance(b, Node) else None
    out = np.zeros((n, c_out), dtype=xv.dtype)
    if n:
        kernels.conv_forward(np.ascontiguousarray(xv), wv, kmap, out)
    if b is not None:
        out += _val(b)

    def vjp(g):
        g = np.ascontiguousarray(g)
        gx = np.zeros_like(xv) if xn is not None else None
        gw = np.zeros_like(wv)
        if n:
            kernels.conv_backward(np.ascontiguousarray(xv), g, wv, kmap, gx, gw)
        gb = g.sum(axis=0) if bn is not None else None
        return (gx, gw, gb)

    return tape._emit(out, (xn, w, bn), vjp)


def usl_conv(tape, x, w, b, child_map):
    """Transposed conv k=2, s=2: each parent row emits 8 child rows.

    child_map is the (N, 8) bijection from build_child_map; w has shape
    (8, C_in, C_out). Stride equals kernel size, so children never overlap.
    """
    xv, wv = _val(x), _val(w)
    n = xv.shape[0]
    c_out = wv.shape[2]
    _add_macs(8 * n * wv.shape[1] * c_out)
    out = np.empty((8 * n, c_out), dtype=xv.dtype)
    for o in range(8):
        res = xv @ wv[o]
        if b is not None:
            res = res + _val(b)
        out[child_map[:, o]] = res
    xn = x if isinstance(x, Node) else None
    bn = b if isinstance(b, Node) else None

    def vjp(g):
        gx = np.zeros_like(xv) if xn is not None else None
        gw = np.empty_like(wv)
        gb = np.zeros(c_out, dtype=g.dtype) if bn is not None else None
        for o in range(8):
            go = g[child_map[:, o]]
            gw[o] = xv.T @ go
            if gx is not None:
                gx += go @ wv[o].T
            if gb is not None:
                gb += go.sum(axis=0)
        return (gx, gw, gb)

    return tape._emit(out, (xn, w, bn), vjp)


def down_conv(tape, x, w, b, s2map, n_out):
    """Strided conv k=2, s=2: parent[p] = b + sum over present children."""
    xv, wv = _val(x), _val(w)
    src, dst = s2map
    c_out = wv.shape[2]
    _add_macs(sum(len(s) for s in src) * wv.shape[1] * c_out)
    out = np.zeros((n_out, c_out), dtype=xv.dtype)
    if b is not None:
        out += _val(b)
    for o in range(8):
        if len(src[o]):
            out[dst[o]] += xv[src[o]] @ wv[o]
    xn = x if isinstance(x, Node) else None
    bn = b if isinstance(b, Node) else None

    def vjp(g):
        gx = np.zeros_like(xv) if xn is not None else None
        gw = np.zeros_like(wv)
        for o in range(8):
            s, d = src[o], dst[o]
            if not len(s):
                continue
            gd = g[d]
            gw[o] = xv[s].T @ gd
            if gx is not None:
                gx[s] += gd @ wv[o].T
        gb = g.sum(axis=0) if bn is not None else None
        return (gx, gw, gb)

    return tape._emit(out, (xn, w, bn), vjp)


def bce_logits_bits(tape, z, targets):
    """Sum of binary cross-entropies in bits between sigmoid(z) and targets.

    Stable form: (softplus(z) - z*t) / ln 2, summed. Matches the ideal code
    length of the occupancy symbols when probabilities are unclamped.
    """
    zv = _val(z)
    t = np.asarray(targets, dtype=zv.dtype)
    loss = (np.logaddexp(0.0, zv) - zv * t).sum() / LN2
    out = np.asarray(loss, dtype=zv.dtype)

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-zv))
        return (g * (s - t) / LN2,)

    return tape._emit(out, (z,), vjp)
