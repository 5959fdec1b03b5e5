"""Secure level-wise decision-tree training.

Each level runs the same phase sequence on shares, with communication shape
fixed by the public parameters (sample count, column count, depth, level):

* partition - every sample fetches its current node's stored feature with an
  oblivious lookup against that level's payload row and descends; samples
  under leaf and dummy nodes keep walking through placeholder features.
* count - every (sample, node) pair contributes a masked product row to the
  node's counter matrix; the mask is [sample's node == this node AND node is
  a candidate], so wanderers and dummies add exact zeros.
* heuristic - split decisions from the counters, either fully in MPC
  (fixed-point impurity scores, masked argmin) or via the attested helper.
* replace - an empty node adopts its parent's effective counters so its
  subtree can still label; leaf-ness itself is decided on the raw counters.
* split - payload and bookkeeping writes: the chosen feature (or the public
  placeholder) into T, child typing, child counter / feature-budget
  inheritance.
* labels - last level only: majority label per node from effective counters.

Counters live in the wide ring; scores move to the narrow ring after a
public scale-down that keeps squared magnitudes inside the division domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import enclave as enclave_mod
from .gadgets import (
    Needs,
    and_reduce,
    argmin_masked,
    b2a,
    division,
    eq,
    lt,
    needs_argmin,
    needs_b2a,
    needs_division,
    needs_eq,
    needs_lt,
    needs_select,
    needs_truncate,
    select_share,
    truncate,
)
from .oaa import needs_oaa, oaa, row_lookup
from .ring import RING32, RING64, Ring
from .rss import AVec, BitVec, PartyEngine, concat_avec, ring_down
from .tree import F_DUMMY, F_INTERNAL, F_LEAF, filler_values


@dataclass
class TrainConfig:
    depth: int = 4
    tau: int = 10
    heuristic: str = "mpc"  # "mpc" | "tee"
    policy: str = "fixed"  # "fixed" | "grow" | "feature_cap"
    max_depth: Optional[int] = None  # growth cap; defaults to the column count
    score_ring: Ring = RING32
    count_ring: Ring = RING64


@dataclass
class TrainResult:
    T: AVec
    F: AVec
    depth: int


def counter_shift(n_samples: int, cfg: TrainConfig) -> int:
    """Public scale-down so squared counters fit the division precondition."""
    headroom = (cfg.score_ring.width - cfg.tau - 2) // 2
    return max(0, int(n_samples).bit_length() - headroom)


def resolved_depth(cfg: TrainConfig, n_columns: int) -> int:
    if cfg.policy == "feature_cap":
        return n_columns
    if cfg.policy == "grow":
        return cfg.max_depth if cfg.max_depth is not None else n_columns
    return cfg.depth


def levels_of(vec: AVec, depth: int) -> List[AVec]:
    return [vec.take(slice((1 << t) - 1, (1 << (t + 1)) - 1)) for t in range(depth)]


def _interleave(a: AVec, b: AVec) -> AVec:
    n, m = a.shape
    lo = np.empty((n, 2 * m), dtype=np.uint64)
    hi = np.empty((n, 2 * m), dtype=np.uint64)
    lo[:, 0::2], lo[:, 1::2] = a.lo, b.lo
    hi[:, 0::2], hi[:, 1::2] = a.hi, b.hi
    return AVec(a.ring, lo, hi)


def _stack3(c0: AVec, c1: AVec, c2: AVec) -> AVec:
    lo = np.stack([c0.lo, c1.lo, c2.lo], axis=1)
    hi = np.stack([c0.hi, c1.hi, c2.hi], axis=1)
    return AVec(c0.ring, lo, hi)


def train_tree(eng: PartyEngine, features: AVec, labels: AVec, cfg: TrainConfig) -> TrainResult:
    n_samples, nf = features.shape
    n_columns = nf + 1
    depth = resolved_depth(cfg, n_columns)
    ring = cfg.count_ring
    fill = filler_values(eng.seeds.filler_seed, (1 << depth) - 1, n_columns)

    with eng.phase("count:0"):
        prods = eng.mul(features, labels.reshape(n_samples, 1), tag="count.mul")
    sample_cols = AVec(ring,
                       np.concatenate([features.lo, prods.lo, labels.lo.reshape(-1, 1)], axis=1),
                       np.concatenate([features.hi, prods.hi, labels.hi.reshape(-1, 1)], axis=1))

    m_idx = eng.const_a(np.zeros(n_samples, dtype=np.uint64), ring)
    f_level = eng.const_a(np.ones(1, dtype=np.uint64), ring)
    gam = eng.const_bits(np.ones((1, nf), dtype=np.uint8))
    c_start = AVec(ring, np.zeros((1, 3, 2 * nf), dtype=np.uint64), np.zeros((1, 3, 2 * nf), dtype=np.uint64))
    c_eff_prev: Optional[AVec] = None
    t_parts: List[AVec] = []
    f_parts: List[AVec] = []
    level_payloads: List[AVec] = []

    for level in range(depth):
        off = (1 << level) - 1
        n_nodes = 1 << level

        if level > 0:
            with eng.phase(f"partition:{level}"):
                local = eng.sub_pub(m_idx, (1 << (level - 1)) - 1)
                feat_idx = oaa(eng, level_payloads[level - 1], local)
                dval = row_lookup(eng, features, feat_idx)
                m_idx = eng.add_pub(m_idx.mul_public(2).add(dval), 1)

        with eng.phase(f"count:{level}"):
            c_orig = c_start.add(_count_level(eng, sample_cols, m_idx, f_level, off, n_nodes, nf, ring))

        last = level == depth - 1
        sd = new_f = None
        is_int = new_gam = None
        if not last:
            if cfg.heuristic == "tee":
                with eng.phase(f"hc_tee:{level}"):
                    sd, new_f, is_int, new_gam = _heuristic_tee(eng, c_orig, gam, f_level, level, n_columns)
            else:
                with eng.phase(f"hc_mpc:{level}"):
                    sd, new_f, is_int, new_gam = _heuristic_mpc(eng, c_orig, gam, f_level, n_samples, cfg)

        with eng.phase(f"replace:{level}"):
            if level == 0:
                c_eff = c_orig
            else:
                tot = c_orig.take((slice(None), 0, 0)).add(c_orig.take((slice(None), 0, 1)))
                is_empty = eq(eng, tot, 0)
                parents = c_eff_prev.take(np.repeat(np.arange(n_nodes // 2), 2))
                c_eff = select_share(eng, c_orig, parents, is_empty)

        do_labels = last
        if not last and cfg.policy == "grow":
            with eng.phase(f"stop:{level}"):
                all_declined = eng.open_bits(and_reduce(eng, eng.bnot(is_int).reshape(n_nodes, 1)), tag="stop")
            do_labels = bool(all_declined[0])

        if not do_labels:
            with eng.phase(f"split:{level}"):
                fill_now = eng.const_a(fill[off : off + n_nodes], ring)
                t_level = select_share(eng, fill_now, sd, is_int)
                child_f = select_share(eng, eng.add_pub(eng.zero_like(f_level), F_DUMMY),
                                       eng.add_pub(eng.zero_like(f_level), F_LEAF), is_int)
                child_c = select_share(eng, c_eff, eng.zero_like(c_eff), is_int)
            t_parts.append(t_level)
            f_parts.append(new_f)
            level_payloads.append(t_level)
            f_level = child_f.repeat(2)
            c_start = child_c.take(np.repeat(np.arange(n_nodes), 2))
            gam = new_gam.take(np.repeat(np.arange(n_nodes), 2))
            c_eff_prev = c_eff
            continue

        with eng.phase(f"labels:{level}"):
            if cfg.heuristic == "tee":
                lab = _labels_tee(eng, c_eff, level, n_columns)
            else:
                psi0 = c_eff.take((slice(None), 1, 0)).add(c_eff.take((slice(None), 1, 1)))
                psi1 = c_eff.take((slice(None), 2, 0)).add(c_eff.take((slice(None), 2, 1)))
                lab = b2a(eng, lt(eng, psi0, psi1), ring)
        t_parts.append(lab)
        f_parts.append(f_level)
        return TrainResult(T=concat_avec([p.ravel() for p in t_parts]),
                           F=concat_avec([p.ravel() for p in f_parts]),
                           depth=level + 1)
    raise AssertionError("unreachable")


def _count_level(eng: PartyEngine, sample_cols: AVec, m_idx: AVec, f_level: AVec,
                 off: int, n_nodes: int, nf: int, ring: Ring) -> AVec:
    """Masked counter accumulation: one product row per (sample, node)."""
    n_samples = m_idx.size
    width = 2 * nf + 1
    is_leaf = eq(eng, f_level, F_LEAF)
    step = max(1, eng.lane_limit // max(n_nodes * width, 1))
    s_mask = AVec(ring, np.zeros(n_nodes, dtype=np.uint64), np.zeros(n_nodes, dtype=np.uint64))
    s_cols = AVec(ring, np.zeros((n_nodes, width), dtype=np.uint64), np.zeros((n_nodes, width), dtype=np.uint64))
    ramp = np.arange(off, off + n_nodes, dtype=np.uint64)
    for lo_i in range(0, n_samples, step):
        hi_i = min(lo_i + step, n_samples)
        span = hi_i - lo_i
        m_rep = m_idx.take(slice(lo_i, hi_i)).repeat(n_nodes)
        hits = eq(eng, m_rep, np.tile(ramp, span))
        lcf = eng.and_bits(hits, is_leaf.tile(span))
        la = b2a(eng, lcf, ring).reshape(span, n_nodes, 1)
        rows = sample_cols.take(slice(lo_i, hi_i)).reshape(span, 1, width)
        contrib = eng.mul(rows, la, tag="count.mul")
        s_cols = s_cols.add(contrib.sum(axis=0))
        s_mask = s_mask.add(la.reshape(span, n_nodes).sum(axis=0))
    sx = s_cols.take((slice(None), slice(0, nf)))
    sp = s_cols.take((slice(None), slice(nf, 2 * nf)))
    sy = s_cols.take((slice(None), 2 * nf)).reshape(n_nodes, 1)
    s1 = s_mask.reshape(n_nodes, 1)
    c0 = _interleave(s1.sub(sx), sx)
    c1 = _interleave(s1.sub(sx).sub(sy).add(sp), sx.sub(sp))
    c2 = _interleave(sy.sub(sp), sp)
    return _stack3(c0, c1, c2)


def _heuristic_mpc(eng: PartyEngine, c_orig: AVec, gam: BitVec, f_level: AVec,
                   n_samples: int, cfg: TrainConfig) -> Tuple[AVec, AVec, BitVec, BitVec]:
    ring = cfg.count_ring
    sring = cfg.score_ring
    n_nodes, _, cols = c_orig.shape
    nf = cols // 2

    psi0 = c_orig.take((slice(None), 1, 0)).add(c_orig.take((slice(None), 1, 1)))
    psi1 = c_orig.take((slice(None), 2, 0)).add(c_orig.take((slice(None), 2, 1)))
    probe = concat_avec([psi0, psi1, eng.sub_pub(f_level, F_LEAF)])
    zeros = eq(eng, probe, 0)
    pure0 = zeros.take(slice(0, n_nodes))
    pure1 = zeros.take(slice(n_nodes, 2 * n_nodes))
    active = zeros.take(slice(2 * n_nodes, 3 * n_nodes))
    no_budget = eng.bnot(gam)
    featureless = and_reduce(eng, BitVec(no_budget.lo.T.copy(), no_budget.hi.T.copy()))
    leafish = eng.or_bits(eng.or_bits(pure0, pure1), featureless)
    should_split = eng.and_bits(active, eng.bnot(leafish))
    new_f = select_share(eng, f_level, eng.zero_like(f_level), should_split)

    shift = counter_shift(n_samples, cfg)
    counters = c_orig.ravel()
    if shift:
        counters = truncate(eng, counters, shift)
    c32 = ring_down(counters, sring).reshape(n_nodes, 3, cols)
    a = c32.take((slice(None), 0))
    tot = a.reshape(n_nodes, nf, 2).sum(axis=2)
    tot_rep = tot.repeat(2).reshape(n_nodes, cols)
    left = concat_avec([c32.ravel(), a.ravel()])
    right = concat_avec([c32.ravel(), tot_rep.ravel()])
    prods = eng.mul(left, right, tag="hc.mul")
    squares = prods.take(slice(0, 3 * n_nodes * cols)).reshape(n_nodes, 3, cols)
    qvals = prods.take(slice(3 * n_nodes * cols, None)).reshape(n_nodes, cols)
    pvals = squares.take((slice(None), 0)).sub(squares.take((slice(None), 1))).sub(squares.take((slice(None), 2)))
    qzero = eq(eng, qvals, 0)
    qsafe = qvals.add(b2a(eng, qzero, sring))
    terms = division(eng, pvals, qsafe, cfg.tau)
    scores = terms.reshape(n_nodes, nf, 2).sum(axis=2)

    sd = argmin_masked(eng, scores, gam, worst=1 << (cfg.tau + 1), idx_ring=ring)
    hit = eq(eng, sd.repeat(nf), np.tile(np.arange(nf, dtype=np.uint64), n_nodes)).reshape(n_nodes, nf)
    new_gam = eng.and_bits(gam, eng.bnot(hit))
    return sd, new_f, should_split, new_gam


def _heuristic_tee(eng: PartyEngine, c_orig: AVec, gam: BitVec, f_level: AVec,
                   level: int, n_columns: int) -> Tuple[AVec, AVec, BitVec, BitVec]:
    n_nodes = f_level.size
    req = enclave_mod.pack_split_request(
        eng.party, level,
        (c_orig.lo.ravel(), c_orig.hi.ravel()),
        (gam.lo.ravel(), gam.hi.ravel()),
        (f_level.lo, f_level.hi),
        n_columns,
    )
    resp = eng.chan.enclave_call(req, tag=eng.tag("hc_tee"))
    (sd_lo, sd_hi), (f_lo, f_hi), (i_lo, i_hi), (g_lo, g_hi) = enclave_mod.parse_split_response(
        resp, n_nodes, n_columns)
    ring = c_orig.ring
    return (AVec(ring, sd_lo, sd_hi), AVec(ring, f_lo, f_hi),
            BitVec(i_lo, i_hi), BitVec(g_lo, g_hi))


def _labels_tee(eng: PartyEngine, c_eff: AVec, level: int, n_columns: int) -> AVec:
    n_nodes = c_eff.shape[0]
    req = enclave_mod.pack_labels_request(
        eng.party, level, (c_eff.lo.ravel(), c_eff.hi.ravel()), n_nodes, n_columns)
    resp = eng.chan.enclave_call(req, tag=eng.tag("labels_tee"))
    lo, hi = enclave_mod.parse_labels_response(resp, n_nodes)
    return AVec(c_eff.ring, lo, hi)


# ---------------------------------------------------------------------------
# Material estimation (mirrors consumption exactly for the fixed policy)
# ---------------------------------------------------------------------------


def training_needs(n_samples: int, n_columns: int, cfg: TrainConfig) -> Needs:
    nf = n_columns - 1
    depth = resolved_depth(cfg, n_columns)
    w = cfg.count_ring.width
    sw = cfg.score_ring.width
    needs = Needs()
    for level in range(depth):
        n_nodes = 1 << level
        cols = 2 * nf
        if level > 0:
            needs.merge(needs_oaa(n_samples, 1 << (level - 1), w))
            needs.merge(needs_oaa(n_samples, nf, w))  # row fetch costs match oaa
        needs.merge(needs_eq(1, w).scaled(n_nodes))  # candidate test
        needs.merge(needs_eq(n_samples * n_nodes, w))
        needs.merge(needs_b2a(n_samples * n_nodes, w))
        last = level == depth - 1
        if not last:
            if cfg.heuristic == "mpc":
                needs.merge(needs_eq(3 * n_nodes, w))
                needs.merge(needs_select(n_nodes, w))  # new type
                shift = counter_shift(n_samples, cfg)
                if shift:
                    needs.merge(needs_truncate(n_nodes * 3 * cols, w, shift))
                needs.merge(needs_eq(n_nodes * cols, sw))
                needs.merge(needs_b2a(n_nodes * cols, sw))
                needs.merge(needs_division(n_nodes * cols, sw, cfg.tau))
                needs.merge(needs_argmin(n_nodes, nf, sw, w))
                needs.merge(needs_eq(n_nodes * nf, w))  # budget clear
        if level > 0:
            needs.merge(needs_eq(n_nodes, w))  # emptiness
            needs.merge(needs_select(n_nodes, w))  # counter inheritance
        if not last:
            needs.merge(needs_select(n_nodes, w).scaled(3))  # payload, child type, child counters
        else:
            if cfg.heuristic == "mpc":
                needs.merge(needs_lt(n_nodes, w))
                needs.merge(needs_b2a(n_nodes, w))
    return needs
