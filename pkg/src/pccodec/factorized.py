"""Learned factorized prior over quantized latent channels.

Each channel gets an independent monotone CDF built from a chain of small
affine layers (widths 1-3-3-3-1) with softplus-positive weights and
tanh-gated nonlinearities, so monotonicity holds for any parameter values.
The probability of integer v is CDF(v+0.5) - CDF(v-0.5).

For actual coding the float CDF is frozen into 16-bit cumulative counts
(every bucket at least one count) over the support [y_min-1, y_max+1]; the
two end buckets act as escapes backed by raw 32-bit values, so any integer
round-trips.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from . import tape as T
from .rangecoder import DecodeError, RangeDecoder, RangeEncoder

FILTERS = (3, 3, 3)
TAIL_MASS = 1e-9
LOG2E = 1.0 / math.log(2.0)


def init_factorized(rng: np.random.Generator, channels: int, prefix: str, init_scale=10.0) -> dict:
    dims = (1,) + FILTERS + (1,)
    scale = init_scale ** (1.0 / (len(FILTERS) + 1))
    p = {}
    for i in range(len(dims) - 1):
        init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
        p[f"{prefix}/m{i}"] = np.full((channels, dims[i + 1], dims[i]), init, np.float32)
        p[f"{prefix}/b{i}"] = rng.uniform(-0.5, 0.5, (channels, dims[i + 1])).astype(np.float32)
        if i < len(dims) - 2:
            p[f"{prefix}/a{i}"] = np.zeros((channels, dims[i + 1]), np.float32)
    return p


def n_layers(params, prefix) -> int:
    n = 0
    while f"{prefix}/m{n}" in params:
        n += 1
    return n


def channels_of(params, prefix) -> int:
    return params[f"{prefix}/m0"].shape[0]


# ---------------------------------------------------------------------------
# plain numpy evaluation (inference / table building)

def _softplus(x):
    return np.logaddexp(0.0, x)


def cdf_logits_np(params: dict, prefix: str, x: np.ndarray) -> np.ndarray:
    """Pre-sigmoid CDF values; x is (N, C) float."""
    k = n_layers(params, prefix)
    t = np.asarray(x, np.float64)[:, :, None]
    for i in range(k):
        m = _softplus(params[f"{prefix}/m{i}"].astype(np.float64))
        t = np.einsum("ncf,cgf->ncg", t, m) + params[f"{prefix}/b{i}"].astype(np.float64)
        if i < k - 1:
            a = np.tanh(params[f"{prefix}/a{i}"].astype(np.float64))
            t = t + a * np.tanh(t)
    return t[:, :, 0]


def cdf_np(params, prefix, x):
    return 1.0 / (1.0 + np.exp(-cdf_logits_np(params, prefix, x)))


def pmf_np(params, prefix, v: np.ndarray) -> np.ndarray:
    """P(value == v) per channel; v is (N, C) integers (or floats)."""
    v = np.asarray(v, np.float64)
    return cdf_np(params, prefix, v + 0.5) - cdf_np(params, prefix, v - 0.5)


def model_bits_np(params, prefix, values: np.ndarray) -> float:
    """Total ideal code length sum(-log2 max(pmf, tail)) of (N, C) values."""
    if len(values) == 0:
        return 0.0
    p = np.maximum(pmf_np(params, prefix, values), TAIL_MASS)
    return float(-np.log2(p).sum())


# ---------------------------------------------------------------------------
# differentiable rate term

def factorized_bits(tp, pv, prefix: str, x):
    """Rate node: sum of -log2(max(pmf(x), tail)); x is an (N, C) Node of
    (noisy) latent values."""
    k = n_layers(pv, prefix)

    def chain(v):
        t = T.reshape(tp, v, (v.shape[0], v.shape[1], 1))
        for i in range(k):
            m = T.softplus(tp, pv[f"{prefix}/m{i}"])
            t = T.channel_matmul(tp, t, m)
            t = T.add(tp, t, pv[f"{prefix}/b{i}"])
            if i < k - 1:
                gate = T.tanh(tp, pv[f"{prefix}/a{i}"])
                t = T.add(tp, t, T.mul(tp, gate, T.tanh(tp, t)))
        return T.sigmoid(tp, T.reshape(tp, t, (v.shape[0], v.shape[1])))

    half = np.asarray(0.5, dtype=x.value.dtype)
    upper = chain(T.add(tp, x, half))
    lower = chain(T.sub(tp, x, half))
    pmf = T.clip_min(tp, T.sub(tp, upper, lower), TAIL_MASS)
    nats = T.sum_all(tp, T.log(tp, pmf))
    return T.mul(tp, nats, np.asarray(-LOG2E, dtype=x.value.dtype))


# ---------------------------------------------------------------------------
# support bounds and integer coding tables

def support_bounds(params, prefix, tail=TAIL_MASS) -> np.ndarray:
    """(C, 2) integer [y_min, y_max] per channel: the smallest ranges whose
    outside mass is below tail on each side (always containing 0)."""
    c = channels_of(params, prefix)
    lo, hi = -2, 2
    while hi < (1 << 15):
        grid = np.arange(lo, hi + 1, dtype=np.float64)
        x = np.repeat(grid[:, None], c, axis=1)
        lower_tail = cdf_np(params, prefix, x - 0.5)
        upper_tail = 1.0 - cdf_np(params, prefix, x + 0.5)
        if lower_tail[0].max() <= tail and upper_tail[-1].max() <= tail:
            break
        lo, hi = lo * 2, hi * 2
    bounds = np.zeros((c, 2), dtype=np.int64)
    for ch in range(c):
        inside = np.flatnonzero((lower_tail[:, ch] > tail) | (upper_tail[:, ch] > tail))
        if len(inside):
            bounds[ch, 0] = min(grid[inside[0]], 0)
            bounds[ch, 1] = max(grid[inside[-1]], 0)
    return bounds


def build_coding_tables(params, prefix, bounds: np.ndarray) -> list:
    """Per-channel cumulative count tables (M+1 entries, cum[-1] = 65536).

    The CDF is sampled at half-integers over [y_min-1.5, y_max+1.5]; each
    bucket (including the two escape buckets at the ends) gets at least one
    count, and the leftover counts are spread by largest fractional part.
    """
    tables = []
    c = channels_of(params, prefix)
    for ch in range(c):
        ymin, ymax = int(bounds[ch, 0]), int(bounds[ch, 1])
        m = ymax - ymin + 3
        edges = np.arange(ymin - 1, ymax + 2, dtype=np.float64) - 0.5
        edges = np.append(edges, ymax + 1.5)
        f = cdf_np(params, prefix, np.repeat(edges[:, None], c, axis=1))[:, ch]
        pmf = np.maximum(np.diff(f), 0.0)
        total = pmf.sum()
        if total <= 0:
            pmf = np.ones(m)
            total = float(m)
        budget = (1 << 16) - m
        exact = pmf / total * budget
        base = np.floor(exact).astype(np.int64)
        rem = budget - int(base.sum())
        if rem > 0:
            frac = exact - base
            order = np.lexsort((np.arange(m), -frac))
            base[order[:rem]] += 1
        counts = base + 1
        cum = np.zeros(m + 1, dtype=np.int64)
        np.cumsum(counts, out=cum[1:])
        tables.append(cum)
    return tables


def symbols_for_values(values_col: np.ndarray, ymin: int, ymax: int):
    """Map a channel's values to table symbols; escapes get the end buckets."""
    m = ymax - ymin + 3
    s = np.clip(values_col - (ymin - 1), 0, m - 1)
    escape = (s == 0) | (s == m - 1)
    return s.astype(np.int64), escape


def encode_latents(values: np.ndarray, tables: list, bounds: np.ndarray) -> bytes:
    """Channel-major range coding of (N, C) integer values with raw escapes."""
    values = np.asarray(values, np.int64)
    enc = RangeEncoder()
    escapes = []
    for ch in range(values.shape[1] if values.size else bounds.shape[0]):
        cum = tables[ch]
        ymin, ymax = int(bounds[ch, 0]), int(bounds[ch, 1])
        if len(values) == 0:
            continue
        syms, esc = symbols_for_values(values[:, ch], ymin, ymax)
        escapes.extend(values[esc, ch].tolist())
        for s in syms.tolist():
            enc.encode_symbol(int(cum[s]), int(cum[s + 1]))
    body = enc.finish()
    out = struct.pack("<I", len(body)) + body + struct.pack("<I", len(escapes))
    out += struct.pack(f"<{len(escapes)}i", *escapes) if escapes else b""
    return out


def decode_latents(data: bytes, n: int, tables: list, bounds: np.ndarray) -> np.ndarray:
    c = bounds.shape[0]
    if len(data) < 4:
        raise DecodeError("latent payload truncated")
    (body_len,) = struct.unpack_from("<I", data, 0)
    body = data[4 : 4 + body_len]
    if len(body) != body_len:
        raise DecodeError("latent payload truncated")
    off = 4 + body_len
    (n_esc,) = struct.unpack_from("<I", data, off)
    off += 4
    esc = list(struct.unpack_from(f"<{n_esc}i", data, off)) if n_esc else []
    esc_pos = 0
    values = np.zeros((n, c), dtype=np.int64)
    if n:
        dec = RangeDecoder(body)
        for ch in range(c):
            cum = tables[ch]
            ymin, ymax = int(bounds[ch, 0]), int(bounds[ch, 1])
            m = ymax - ymin + 3
            for i in range(n):
                s = dec.decode_symbol(cum)
                if s == 0 or s == m - 1:
                    if esc_pos >= len(esc):
                        raise DecodeError("escape table exhausted")
                    values[i, ch] = esc[esc_pos]
                    esc_pos += 1
                else:
                    values[i, ch] = s + (ymin - 1)
    if esc_pos != len(esc):
        raise DecodeError("unused escape values")
    return values


def table_bits(values: np.ndarray, tables: list, bounds: np.ndarray) -> float:
    """Ideal bits of the values under the quantized integer tables."""
    total = 0.0
    for ch in range(bounds.shape[0]):
        if len(values) == 0:
            break
        cum = tables[ch]
        syms, _ = symbols_for_values(values[:, ch], int(bounds[ch, 0]), int(bounds[ch, 1]))
        p = (cum[syms + 1] - cum[syms]) / float(1 << 16)
        total += float(-np.log2(p).sum())
    return total
