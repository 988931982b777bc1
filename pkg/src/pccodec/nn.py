"""Trainable blocks over sparse tensors.

Parameters live in flat dicts mapping slash-separated names to float32
arrays. Forward functions take a dict of tape Nodes under the same names, so
the same code path serves inference and training.

Block structure. A feature extractor ("fel") is an entry 1x1x1 projection to
width c followed by n_blocks residual inception blocks. Each block runs two
parallel branches on c channels:

    branch1: conv(k, c -> c/2), relu
    branch2: 1x1x1 (c -> c/2), relu, then conv(k, c/2 -> c/2), relu

their concatenation (width c) is added back onto the block input, with no
activation after the add. In the dynamic variant the branch2 pair becomes a
dynamic sparse convolution: the pointwise half runs everywhere, the spatial
half only on the top-rho fraction of points ranked by neighborhood feature
correlation; the remaining points pass the pointwise output through.
"""

from __future__ import annotations

import math

import numpy as np

from . import coords as C
from . import tape as T


class GradientError(Exception):
    """Non-finite gradient; carries the offending parameter name."""


# ---------------------------------------------------------------------------
# initialization

def xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def init_dense(rng, c_in, c_out, prefix):
    return {
        f"{prefix}/w": xavier(rng, (c_in, c_out), c_in, c_out),
        f"{prefix}/b": np.zeros(c_out, np.float32),
    }


def init_conv(rng, k, c_in, c_out, prefix):
    kk = k ** 3
    return {
        f"{prefix}/w": xavier(rng, (kk, c_in, c_out), kk * c_in, kk * c_out),
        f"{prefix}/b": np.zeros(c_out, np.float32),
    }


def init_usl(rng, c_in, c_out, prefix):
    return {
        f"{prefix}/w": xavier(rng, (8, c_in, c_out), c_in, 8 * c_out),
        f"{prefix}/b": np.zeros(c_out, np.float32),
    }


def init_fel(rng, c_in, c, k, prefix, n_blocks=3):
    p = init_dense(rng, c_in, c, f"{prefix}/entry")
    h = c // 2
    for i in range(n_blocks):
        p.update(init_conv(rng, k, c, h, f"{prefix}/block{i}/b1"))
        p.update(init_dense(rng, c, h, f"{prefix}/block{i}/b2a"))
        p.update(init_conv(rng, k, h, h, f"{prefix}/block{i}/b2b"))
    return p


def init_opg(rng, c, prefix):
    return init_dense(rng, c, 1, f"{prefix}/opg")


def n_blocks_of(params, prefix) -> int:
    n = 0
    while f"{prefix}/block{n}/b1/w" in params:
        n += 1
    return n


# ---------------------------------------------------------------------------
# forward passes

def dense_fwd(tp, pv, prefix, x):
    return T.dense(tp, x, pv[f"{prefix}/w"], pv[f"{prefix}/b"])


def conv_fwd(tp, pv, prefix, x, kmap):
    return T.sparse_conv(tp, x, pv[f"{prefix}/w"], pv[f"{prefix}/b"], kmap)


def usl_fwd(tp, pv, prefix, x, child_map):
    return T.usl_conv(tp, x, pv[f"{prefix}/w"], pv[f"{prefix}/b"], child_map)


def correlation_scores(feats: np.ndarray, kmap: C.KernelMap) -> np.ndarray:
    """Mean inner product of per-point standardized features over the
    occupied neighborhood, normalized by feature width; no-neighbor points
    score 0. Pure numpy (ranking is not differentiated through)."""
    f = np.asarray(feats, np.float64)
    n, width = f.shape
    if n == 0:
        return np.zeros(0)
    mu = f.mean(axis=1, keepdims=True)
    sd = np.maximum(f.std(axis=1, keepdims=True), 1e-6)
    z = (f - mu) / sd
    # Accumulate over all pairs, then remove the always-present self pair.
    w = (z[kmap.src_all] * z[kmap.dst_all]).sum(axis=1)
    acc = np.bincount(kmap.dst_all, weights=w, minlength=n)
    acc -= (z * z).sum(axis=1)
    cnt = np.bincount(kmap.dst_all, minlength=n).astype(np.float64) - 1.0
    out = np.zeros(n)
    nz = cnt > 0
    out[nz] = acc[nz] / (cnt[nz] * width)
    return out


def dsc_split(scores: np.ndarray, rho: float) -> np.ndarray:
    """Row indices (ascending) of the top ceil(rho*N) points by score;
    ties broken by canonical coordinate order."""
    n = len(scores)
    m = min(n, math.ceil(rho * n))
    if m == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:m])


def dsc_fwd(tp, pv, prefix_a, prefix_b, x, coords, kmap, rho, corr_k=3):
    """Dynamic sparse convolution pair.

    prefix_a is the pointwise conv run on every point; prefix_b the spatial
    conv run on the top-rho split. Returns (output node, x1 row indices).
    """
    with T.dynamic_scope():
        u = T.relu(tp, dense_fwd(tp, pv, prefix_a, x))
    if corr_k == kmap.k:
        corr_map = kmap
    else:
        corr_map = C.build_kernel_map(coords, corr_k)
    scores = correlation_scores(u.value, corr_map)
    x1 = dsc_split(scores, rho)
    if len(x1) == 0:
        return u, x1
    sub_coords = coords[x1]
    sub_map = kmap if len(x1) == len(coords) else C.build_kernel_map(sub_coords, kmap.k)
    u1 = T.gather_rows(tp, u, x1)
    with T.dynamic_scope():
        y1 = T.relu(tp, conv_fwd(tp, pv, prefix_b, u1, sub_map))
    return T.row_patch(tp, u, x1, y1), x1


def fel_fwd(tp, pv, prefix, x, kmap, coords=None, rho=None, corr_k=3):
    """Feature extractor. rho=None gives the static path; otherwise the
    branch2 pairs run as dynamic sparse convolutions (requires coords)."""
    x = dense_fwd(tp, pv, f"{prefix}/entry", x)
    for i in range(n_blocks_of(pv, prefix)):
        blk = f"{prefix}/block{i}"
        br1 = T.relu(tp, conv_fwd(tp, pv, f"{blk}/b1", x, kmap))
        if rho is None:
            h = T.relu(tp, dense_fwd(tp, pv, f"{blk}/b2a", x))
            br2 = T.relu(tp, conv_fwd(tp, pv, f"{blk}/b2b", h, kmap))
        else:
            br2, _ = dsc_fwd(tp, pv, f"{blk}/b2a", f"{blk}/b2b", x, coords, kmap, rho, corr_k)
        x = T.add(tp, x, T.concat_cols(tp, [br1, br2]))
    return x


PROB_FLOOR = 2.0 ** -16


def opg_fwd(tp, pv, prefix, x):
    """Occupancy head: logits from a c->1 dense layer."""
    return dense_fwd(tp, pv, f"{prefix}/opg", x)


def clamp_probs(p: np.ndarray) -> np.ndarray:
    """Coder-safe probabilities in [2^-16, 1 - 2^-16]."""
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def logits_to_probs(logits: np.ndarray) -> np.ndarray:
    return clamp_probs(1.0 / (1.0 + np.exp(-logits.reshape(-1).astype(np.float64))))


# ---------------------------------------------------------------------------
# parameter plumbing

def wrap_params(tp: T.Tape, params: dict, dtype=None) -> dict:
    if dtype is None:
        return {k: tp.var(v) for k, v in params.items()}
    return {k: tp.var(v.astype(dtype)) for k, v in params.items()}


def read_grads(pvars: dict) -> dict:
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in pvars.items()}


def check_finite_grads(grads: dict):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter '{name}'")


class Adam:
    """Standard bias-corrected Adam (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float | None = None):
        check_finite_grads(grads)
        lr = self.lr if lr is None else lr
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(p.dtype)


def cosine_lr(step: int, total: int, lr_hi: float, lr_lo: float) -> float:
    if total <= 1:
        return lr_lo
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_lo + 0.5 * (lr_hi - lr_lo) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# finite-difference gradient checking

def grad_check(loss_fn, params: dict, h=1e-3, tol=1e-4, rng=None, sample=None):
    """Compare analytic gradients of loss_fn against central differences.

    loss_fn(tape, pvars) must build and return a scalar Node. Parameters are
    promoted to float64 for the check. Returns a report dict with per-
    parameter max relative error; report["ok"] is the overall verdict.
    """
    p64 = {k: v.astype(np.float64) for k, v in params.items()}
    tp = T.Tape()
    pv = wrap_params(tp, p64)
    loss = loss_fn(tp, pv)
    tp.backward(loss)
    analytic = {k: (n.grad.copy() if n.grad is not None else np.zeros_like(n.value)) for k, n in pv.items()}

    def eval_loss(pd):
        t2 = T.Tape()
        return float(loss_fn(t2, wrap_params(t2, pd)).value)

    errors = {}
    worst = ("", 0.0)
    for name, arr in p64.items():
        flat = arr.reshape(-1)
        idxs = range(flat.size)
        if sample is not None and flat.size > sample:
            r = rng or np.random.default_rng(0)
            idxs = r.choice(flat.size, size=sample, replace=False)
        max_err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp = eval_loss(p64)
            flat[i] = orig - h
            lm = eval_loss(p64)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > max_err:
                max_err = err
        errors[name] = max_err
        if max_err > worst[1]:
            worst = (name, max_err)
    return {"errors": errors, "worst": worst, "ok": worst[1] < tol, "tol": tol}
