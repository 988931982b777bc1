"""Staged lossless coordinate coder.

One scale transition codes the occupancy of every candidate child (8 per
parent) in 8 stages. A shared trunk (feature extractor at the parent scale,
then a transposed conv to the children) provides cross-scale features; each
stage then runs its own two feature extractors and occupancy head over the
stage context: the already-decoded occupied voxels of earlier stages plus
the current stage's candidates, with a 0/1 decoded flag channel. Occupancy
symbols are range-coded against the predicted probabilities, one coder
stream per scale.

Encoder and decoder drive the exact same forward code path, so probability
streams match bit for bit. Stage nets share weights across scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coords as C
from . import nn
from . import tape as T
from .grouping import GroupingScheme, assign_stages
from .rangecoder import (
    RangeDecoder,
    RangeEncoder,
    bit_cost_bits,
    quantize_prob,
)
from .sparse import build_pyramid

FEL_K = 5
FEL_C = 16
N_STAGES = 8
BASE_MAX_POINTS = 64


class CorruptStreamError(Exception):
    pass


class TrainingDiverged(Exception):
    def __init__(self, message, last_params):
        super().__init__(message)
        self.last_params = last_params


def init_coord_params(rng: np.random.Generator) -> dict:
    """Trunk plus 8 per-stage nets; identical parameter set at every scale."""
    p = nn.init_fel(rng, 1, FEL_C, FEL_K, "coord/front")
    p.update(nn.init_usl(rng, FEL_C, FEL_C, "coord/usl"))
    for t in range(1, N_STAGES + 1):
        p.update(nn.init_fel(rng, FEL_C + 1, FEL_C, FEL_K, f"coord/stage{t}/fel0"))
        p.update(nn.init_fel(rng, FEL_C, FEL_C, FEL_K, f"coord/stage{t}/fel1"))
        p.update(nn.init_opg(rng, FEL_C, f"coord/stage{t}"))
    return p


def zero_stage_nets(params: dict) -> dict:
    """Copy of params with every stage net zeroed: all probabilities 0.5."""
    out = {}
    for k, v in params.items():
        out[k] = np.zeros_like(v) if k.startswith("coord/stage") else v.copy()
    return out


# ---------------------------------------------------------------------------
# shared forward machinery

def trunk_features(tp, pv, parents: np.ndarray, parent_kmap=None, child_map=None):
    """Candidate-child features from the parent occupancy pattern."""
    if parent_kmap is None:
        parent_kmap = C.build_kernel_map(parents, FEL_K)
    if child_map is None:
        child_map = C.build_child_map(parents)
    ones = np.ones((len(parents), 1), dtype=np.float32)
    f = nn.fel_fwd(tp, pv, "coord/front", tp.var(ones), parent_kmap)
    return nn.usl_fwd(tp, pv, "coord/usl", f, child_map)


def stage_logits(tp, pv, stage: int, ctx_feats: np.ndarray, kmap, cur_pos: np.ndarray):
    """Logits of the current-stage candidates given the stage context."""
    x = tp.var(ctx_feats)
    x = nn.fel_fwd(tp, pv, f"coord/stage{stage}/fel0", x, kmap)
    x = nn.fel_fwd(tp, pv, f"coord/stage{stage}/fel1", x, kmap)
    logits = nn.opg_fwd(tp, pv, f"coord/stage{stage}", x)
    return T.gather_rows(tp, logits, cur_pos)


def _ctx_inputs(ppov, feats_value, occupied, cur_mask):
    """Context rows, features (+decoded flag), kernel map, and the positions
    of the current-stage rows within the context."""
    ctx_mask = occupied | cur_mask
    ctx_rows = np.flatnonzero(ctx_mask)
    flags = occupied[ctx_rows].astype(feats_value.dtype)
    ctx_feats = np.concatenate([feats_value[ctx_rows], flags[:, None]], axis=1)
    kmap = C.build_kernel_map(ppov[ctx_rows], FEL_K)
    cur_pos = np.searchsorted(ctx_rows, np.flatnonzero(cur_mask))
    return ctx_rows, ctx_feats, kmap, cur_pos


@dataclass
class StageRate:
    scale: int
    stage: int
    symbols: int
    ideal_bits: float
    actual_bits: float | None = None


@dataclass
class RateReport:
    rows: list = field(default_factory=list)
    scale_payload_bits: dict = field(default_factory=dict)
    header_bits: int = 0
    feature_ideal_bits: float = 0.0
    feature_payload_bits: int = 0

    @property
    def ideal_bits(self) -> float:
        return float(sum(r.ideal_bits for r in self.rows))

    @property
    def payload_bits(self) -> int:
        return int(sum(self.scale_payload_bits.values()))

    @property
    def n_streams(self) -> int:
        return len(self.scale_payload_bits)

    def scale_ideal_bits(self, scale: int) -> float:
        return float(sum(r.ideal_bits for r in self.rows if r.scale == scale))

    def stage_summary(self):
        out = {}
        for r in self.rows:
            agg = out.setdefault(r.stage, [0, 0.0])
            agg[0] += r.symbols
            agg[1] += r.ideal_bits
        return out


def estimate_rate(probs16: np.ndarray, symbols: np.ndarray) -> float:
    """Ideal bits of a binary symbol sequence under its quantized probs."""
    if len(probs16) == 0:
        return 0.0
    return float(bit_cost_bits(probs16, symbols).sum())


def code_scale(
    parents: np.ndarray,
    params: dict,
    scheme: GroupingScheme,
    *,
    truth: np.ndarray | None = None,
    payload: bytes | None = None,
    estimate_only: bool = False,
    scale: int = 0,
    report: RateReport | None = None,
):
    """Encode (truth given) or decode (payload given) one scale transition.

    Returns (child coordinate set, payload bytes or None). Both directions
    execute the same stage loop; only the source of the occupancy symbols
    differs.
    """
    encoding = truth is not None
    if not encoding and payload is None and not estimate_only:
        raise ValueError("need truth (encode) or payload (decode)")
    ppov = C.expand_children(parents)
    labels = assign_stages(ppov, scheme)

    tp = T.Tape()
    pv = nn.wrap_params(tp, params)
    feats = trunk_features(tp, pv, parents).value

    if encoding:
        truth_mask = C.contains(truth, ppov)
    occupied = np.zeros(len(ppov), dtype=bool)

    enc = RangeEncoder() if (encoding and not estimate_only) else None
    dec = RangeDecoder(payload) if not encoding else None

    for stage in range(1, scheme.stage_count() + 1):
        cur_mask = labels == stage
        n_cur = int(cur_mask.sum())
        if n_cur == 0:
            continue
        ctx_rows, ctx_feats, kmap, cur_pos = _ctx_inputs(ppov, feats, occupied, cur_mask)
        stp = T.Tape()
        logits = stage_logits(stp, nn.wrap_params(stp, params), stage, ctx_feats, kmap, cur_pos)
        probs16 = quantize_prob(nn.logits_to_probs(logits.value))

        if encoding:
            bits = truth_mask[cur_mask].astype(np.uint8)
            if enc is not None:
                before = enc.consumed_bits()
                for p16, b in zip(probs16.tolist(), bits.tolist()):
                    enc.encode_bit(p16, b)
                actual = enc.consumed_bits() - before
            else:
                actual = None
        else:
            before = 0.0
            bits = np.empty(n_cur, dtype=np.uint8)
            for i, p16 in enumerate(probs16.tolist()):
                bits[i] = dec.decode_bit(p16)
            actual = None

        if report is not None:
            report.rows.append(
                StageRate(scale, stage, n_cur, estimate_rate(probs16, bits), actual)
            )
        cur_rows = np.flatnonzero(cur_mask)
        occupied[cur_rows[bits == 1]] = True

    child = ppov[occupied]
    if encoding:
        out_payload = enc.finish() if enc is not None else None
        return child, out_payload
    if len(child) == 0 or not np.array_equal(C.downsample(child), parents):
        raise CorruptStreamError("decoded scale does not downsample to its parents")
    return child, None


# ---------------------------------------------------------------------------
# whole-cloud coding (payload side; container assembly lives in bitstream.py)

def encode_coord_payload(
    pyramid,
    params: dict,
    scheme: GroupingScheme,
    *,
    top_level: int | None = None,
    estimate_only: bool = False,
    report: RateReport | None = None,
):
    """Per-scale coder payloads from the base level up to top_level."""
    levels = pyramid.levels if top_level is None else pyramid.levels[: top_level + 1]
    chunks = []
    for i in range(len(levels) - 1):
        scale = pyramid.scale_of(i + 1)
        truth = levels[i + 1]
        _, payload = code_scale(
            levels[i],
            params,
            scheme,
            truth=truth,
            estimate_only=estimate_only,
            scale=scale,
            report=report,
        )
        if not estimate_only:
            chunks.append(payload)
            if report is not None:
                report.scale_payload_bits[scale] = 8 * len(payload)
    return chunks


def decode_coord_payload(base: np.ndarray, chunks: list, base_scale: int, params: dict, scheme: GroupingScheme) -> np.ndarray:
    current = base
    for i, chunk in enumerate(chunks):
        current, _ = code_scale(
            current, params, scheme, payload=chunk, scale=base_scale + i + 1
        )
    return current


# ---------------------------------------------------------------------------
# training

@dataclass
class StagePlan:
    stage: int
    ctx_rows: np.ndarray
    ctx_feats_flags: np.ndarray  # decoded-flag column for the context rows
    cur_pos: np.ndarray
    symbols: np.ndarray
    kmap: object


@dataclass
class TransitionPlan:
    parents: np.ndarray
    parent_kmap: object
    child_map: np.ndarray
    ppov: np.ndarray
    n_candidates: int
    stages: list


def plan_transition(parents: np.ndarray, truth: np.ndarray, scheme: GroupingScheme) -> TransitionPlan:
    """Precompute every coordinate-determined structure of one transition.

    In lossless coding the decoded occupancy equals the ground truth, so
    stage contexts (and their kernel maps) do not depend on the model and
    can be cached across training epochs.
    """
    ppov = C.expand_children(parents)
    labels = assign_stages(ppov, scheme)
    truth_mask = C.contains(truth, ppov)
    occupied = np.zeros(len(ppov), dtype=bool)
    stages = []
    for stage in range(1, scheme.stage_count() + 1):
        cur_mask = labels == stage
        if not cur_mask.any():
            continue
        ctx_mask = occupied | cur_mask
        ctx_rows = np.flatnonzero(ctx_mask)
        flags = occupied[ctx_rows].astype(np.float32)
        cur_pos = np.searchsorted(ctx_rows, np.flatnonzero(cur_mask))
        kmap = C.build_kernel_map(ppov[ctx_rows], FEL_K)
        stages.append(
            StagePlan(stage, ctx_rows, flags, cur_pos, truth_mask[cur_mask].astype(np.float32), kmap)
        )
        occupied |= cur_mask & truth_mask
    return TransitionPlan(
        parents,
        C.build_kernel_map(parents, FEL_K),
        C.build_child_map(parents),
        ppov,
        len(ppov),
        stages,
    )


def transition_loss(tp, pv, plan: TransitionPlan):
    """Summed per-stage occupancy cross-entropy in bits for one transition."""
    feats = trunk_features(tp, pv, plan.parents, plan.parent_kmap, plan.child_map)
    total = None
    for st in plan.stages:
        ctx = T.gather_rows(tp, feats, st.ctx_rows)
        ctx = T.concat_cols(tp, [ctx, st.ctx_feats_flags[:, None]])
        x = nn.fel_fwd(tp, pv, f"coord/stage{st.stage}/fel0", ctx, st.kmap)
        x = nn.fel_fwd(tp, pv, f"coord/stage{st.stage}/fel1", x, st.kmap)
        logits = T.gather_rows(tp, nn.opg_fwd(tp, pv, f"coord/stage{st.stage}", x), st.cur_pos)
        loss = T.bce_logits_bits(tp, logits, st.symbols[:, None])
        total = loss if total is None else T.add(tp, total, loss)
    return total


def cloud_plans(cloud: np.ndarray, depth: int, scheme: GroupingScheme, max_transitions=4) -> list:
    """Plans for the finest max_transitions scale transitions of one cloud."""
    pyr = build_pyramid(cloud, depth, BASE_MAX_POINTS)
    first = max(0, len(pyr.levels) - 1 - max_transitions)
    return [
        plan_transition(pyr.levels[i], pyr.levels[i + 1], scheme)
        for i in range(first, len(pyr.levels) - 1)
    ]


@dataclass
class CoordTrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr_hi: float = 8e-4
    lr_lo: float = 5e-5
    max_transitions: int = 4


def train_coord_coder(
    plans_per_cloud: list,
    params: dict,
    cfg: CoordTrainConfig,
    rng: np.random.Generator,
    log_every: int = 0,
    log_fn=print,
):
    """Adam training over precomputed per-cloud transition plans.

    Mutates params in place and returns a per-epoch mean-bits history.
    Aborts with TrainingDiverged (carrying the last finite parameters) if
    the loss goes non-finite.
    """
    opt = nn.Adam(params)
    n = len(plans_per_cloud)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            grads = None
            batch_loss = 0.0
            for ci in batch:
                tp = T.Tape()
                pv = nn.wrap_params(tp, params)
                loss = None
                for plan in plans_per_cloud[ci]:
                    part = transition_loss(tp, pv, plan)
                    loss = part if loss is None else T.add(tp, loss, part)
                lv = float(loss.value)
                if not np.isfinite(lv):
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch}", {k: v.copy() for k, v in params.items()}
                    )
                batch_loss += lv
                tp.backward(loss)
                g = nn.read_grads(pv)
                if grads is None:
                    grads = g
                else:
                    for k in grads:
                        grads[k] += g[k]
            scale = 1.0 / max(len(batch), 1)
            grads = {k: v * scale for k, v in grads.items()}
            lr = nn.cosine_lr(step, total_steps, cfg.lr_hi, cfg.lr_lo)
            opt.step(grads, lr)
            step += 1
            epoch_loss += batch_loss
        history.append(epoch_loss / n)
        if log_every and (epoch + 1) % log_every == 0:
            log_fn(f"epoch {epoch + 1}/{cfg.epochs} mean_bits={history[-1]:.1f}")
    return history
