"""Composite MPC building blocks on top of replicated sharing.

Comparisons follow the masked-opening pattern: open c = x + r for a
preprocessed random r whose bits are also boolean-shared, then evaluate a
boolean circuit on the public bits of c against the shared bits of r.
Equality uses a balanced AND-tree (l-1 AND gates, ceil(log2 l) rounds);
ordering uses a borrow-propagation prefix scan (Hillis-Steele, log2 l
rounds).  Truncation is exact: the borrow scan yields both the wrap bit and
the low-part borrow, so floor(x / 2^k) comes out with zero error for any
unsigned x.

Preprocessed material is consumed through the engine's attached store; the
``needs_*`` helpers mirror each gadget's consumption exactly so a dealer can
provision a run without slack.

Fixed-point division normalizes the divisor with a batched comparison
ladder, runs a public number of Newton reciprocal steps, and rescales.  All
intermediates stay nonnegative and below the ring modulus for quotients up
to 8; relative accuracy holds for quotients in [1/2, 8] (callers with
smaller quotients, like the impurity scores, rely on the absolute error
bound of about one fixed-point ulp per division instead).
"""

from __future__ import annotations

import math
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from .ring import RING64, Ring
from .rss import AVec, BitVec, PartyEngine, concat_avec, concat_bits


class MaterialError(RuntimeError):
    """Preprocessed correlation store cannot satisfy a request."""


# Material keys: ("edabit", width) | ("dabit", width) | ("trunc", width, k)
MaterialKey = Tuple


def edabit_key(width: int) -> MaterialKey:
    return ("edabit", width)


def dabit_key(width: int) -> MaterialKey:
    return ("dabit", width)


def trunc_key(width: int, k: int) -> MaterialKey:
    return ("trunc", width, k)


class Needs(dict):
    """Material requirement counter: key -> element count."""

    def bump(self, key: MaterialKey, n: int) -> "Needs":
        if n:
            self[key] = self.get(key, 0) + int(n)
        return self

    def merge(self, other: Dict) -> "Needs":
        for k, v in other.items():
            self.bump(k, v)
        return self

    def scaled(self, factor: int) -> "Needs":
        out = Needs()
        for k, v in self.items():
            out.bump(k, v * factor)
        return out


def _store(eng: PartyEngine):
    if eng.material is None:
        raise MaterialError("no preprocessing store attached to this engine")
    return eng.material


def _bit_planes(lo_words: np.ndarray, hi_words: np.ndarray, width: int) -> BitVec:
    """Expand packed bit-share words (n,) into bit-plane shares (width, n)."""
    shifts = np.arange(width, dtype=np.uint64)[:, None]
    lo = ((lo_words[None, :] >> shifts) & np.uint64(1)).astype(np.uint8)
    hi = ((hi_words[None, :] >> shifts) & np.uint64(1)).astype(np.uint8)
    return BitVec(lo, hi)


def _public_planes(values: np.ndarray, width: int) -> np.ndarray:
    shifts = np.arange(width, dtype=np.uint64)[:, None]
    return ((values[None, :] >> shifts) & np.uint64(1)).astype(np.uint8)


def and_reduce(eng: PartyEngine, planes: BitVec) -> BitVec:
    """AND over axis 0 of a (k, n) bit matrix; k-1 gates, ceil(log2 k) rounds."""
    cur = planes
    while cur.shape[0] > 1:
        k = cur.shape[0]
        half = k // 2
        a = BitVec(cur.lo[:half], cur.hi[:half])
        b = BitVec(cur.lo[half : 2 * half], cur.hi[half : 2 * half])
        merged = eng.and_bits(a, b)
        if k % 2:
            merged = BitVec(
                np.concatenate([merged.lo, cur.lo[-1:]]),
                np.concatenate([merged.hi, cur.hi[-1:]]),
            )
        cur = merged
    return BitVec(cur.lo[0], cur.hi[0])


def _as_diff(eng: PartyEngine, x: AVec, y: Union[AVec, int, np.ndarray]) -> AVec:
    if isinstance(y, AVec):
        return x.sub(y)
    if isinstance(y, np.ndarray):
        return eng.sub_pub(x, np.broadcast_to(y, x.shape).astype(np.uint64))
    return eng.sub_pub(x, int(y))


def eq(eng: PartyEngine, x: AVec, y: Union[AVec, int, np.ndarray] = 0) -> BitVec:
    """Boolean share of [x == y]; one EdaBit per element, 2l-1 bits online."""
    shape = x.shape
    diff = _as_diff(eng, x, y).ravel()
    ring = diff.ring
    r, (blo, bhi) = _store(eng).take_edabits(ring, diff.size)
    c = eng.open_a(diff.add(r), tag="eq.open")
    notc = (~c) & ring.mask
    planes = eng.xor_pub(_bit_planes(blo, bhi, ring.width), _public_planes(notc, ring.width))
    out = and_reduce(eng, planes)
    return out.reshape(shape)


def needs_eq(count: int, width: int) -> Needs:
    return Needs().bump(edabit_key(width), count)


def _prefix_borrow(eng: PartyEngine, g: BitVec, p: BitVec) -> BitVec:
    """Prefix-combine borrow generate/propagate planes (width, n).

    Row i of the result is the borrow out of bit i, i.e. covers bits 0..i.
    log2(width) rounds, two AND lanes per remaining row per step, batched.
    """
    shift = 1
    width = g.shape[0]
    while shift < width:
        rows = width - shift
        left_g = BitVec(g.lo[shift:], g.hi[shift:])
        left_p = BitVec(p.lo[shift:], p.hi[shift:])
        low_g = BitVec(g.lo[:rows], g.hi[:rows])
        low_p = BitVec(p.lo[:rows], p.hi[:rows])
        both = eng.and_bits(concat_bits([left_p, left_p]).reshape(2 * rows, -1),
                            concat_bits([low_g, low_p]).reshape(2 * rows, -1))
        pg = BitVec(both.lo[:rows], both.hi[:rows])
        pp = BitVec(both.lo[rows:], both.hi[rows:])
        g = BitVec(np.concatenate([g.lo[:shift], g.lo[shift:] ^ pg.lo]),
                   np.concatenate([g.hi[:shift], g.hi[shift:] ^ pg.hi]))
        p = BitVec(np.concatenate([p.lo[:shift], pp.lo]),
                   np.concatenate([p.hi[:shift], pp.hi]))
        shift *= 2
    return g


def _borrow_scan(eng: PartyEngine, c_pub: np.ndarray, blo: np.ndarray, bhi: np.ndarray, width: int) -> BitVec:
    """Shares of S[i] = [c mod 2^{i+1} < r mod 2^{i+1}] for public c, shared r.

    Borrow recurrence with public minuend bits: generate g_i = r_i & ~c_i,
    propagate p_i = ~(c_i ^ r_i) = r_i ^ ~c_i; both are linear here.
    """
    notc = _public_planes((~c_pub) & ((1 << width) - 1 if width < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)), width)
    rbits = _bit_planes(blo, bhi, width)
    return _prefix_borrow(eng, rbits.mask_public(notc), eng.xor_pub(rbits, notc))


def _masked_diff_bits(eng: PartyEngine, c_pub: np.ndarray, blo: np.ndarray, bhi: np.ndarray,
                      width: int) -> BitVec:
    """Shared bit planes of (c - r) mod 2^width for public c, shared r.

    d_i = c_i ^ r_i ^ borrow_in_i, with the borrows from the public-minuend
    scan; every bit is a linear fixup once the scan is done.
    """
    s = _borrow_scan(eng, c_pub, blo, bhi, width)
    rbits = _bit_planes(blo, bhi, width)
    borrow_in = BitVec(np.concatenate([np.zeros_like(s.lo[:1]), s.lo[:-1]]),
                       np.concatenate([np.zeros_like(s.hi[:1]), s.hi[:-1]]))
    return eng.xor_pub(rbits.xor(borrow_in), _public_planes(c_pub, width))


def lt(eng: PartyEngine, x: AVec, y: Union[AVec, int, np.ndarray]) -> BitVec:
    """Boolean share of [x < y], unsigned over the whole ring.

    Two EdaBits per element: both operands are opened under masks, their bit
    planes recovered by subtraction circuits sharing one batched scan, then
    compared by a borrow scan with shared minuend (g_i = y_i & ~x_i).
    """
    shape = x.shape
    xs = x.ravel()
    ring = xs.ring
    n = xs.size
    if isinstance(y, AVec):
        ys = y.ravel()
    else:
        if isinstance(y, np.ndarray):
            arr = np.broadcast_to(y.astype(np.uint64), shape).ravel()
        else:
            arr = np.full(n, int(y) & ring.mask, dtype=np.uint64)
        ys = eng.const_a(ring.reduce(arr), ring)
    both = AVec(ring, np.concatenate([xs.lo, ys.lo]), np.concatenate([xs.hi, ys.hi]))
    r, (blo, bhi) = _store(eng).take_edabits(ring, 2 * n)
    c = eng.open_a(both.add(r), tag="lt.open")
    planes = _masked_diff_bits(eng, c, blo, bhi, ring.width)
    xb = BitVec(planes.lo[:, :n], planes.hi[:, :n])
    yb = BitVec(planes.lo[:, n:], planes.hi[:, n:])
    g = eng.and_bits(yb, eng.bnot(xb), tag="lt.gen")
    rows = _prefix_borrow(eng, g, eng.bnot(xb.xor(yb)))
    out = BitVec(rows.lo[ring.width - 1], rows.hi[ring.width - 1])
    return out.reshape(shape)


def needs_lt(count: int, width: int) -> Needs:
    return Needs().bump(edabit_key(width), 2 * count)


def b2a(eng: PartyEngine, bit: BitVec, ring: Ring) -> AVec:
    """Arithmetic share of a boolean bit; one DaBit and one packed-bit open."""
    shape = bit.shape
    flat = bit.ravel()
    aux, auxbit = _store(eng).take_dabits(ring, flat.size)
    e = eng.open_bits(flat.xor(auxbit), tag="b2a.open")
    coeff = ring.reduce(np.uint64(1) - np.uint64(2) * e.astype(np.uint64))
    out = eng.add_pub(aux.mul_public(coeff), e.astype(np.uint64))
    return out.reshape(shape)


def needs_b2a(count: int, width: int) -> Needs:
    return Needs().bump(dabit_key(width), count)


def select_share(eng: PartyEngine, w1: AVec, w2: AVec, cond: BitVec) -> AVec:
    """Element-wise w1 + cond*(w2 - w1).

    cond may be coarser than the payload: when w1 has cond.size * g elements
    (C-order, payload for one condition contiguous), each condition bit
    selects a block of g elements with a single conversion.
    """
    if w1.size % max(cond.size, 1) != 0:
        raise ValueError("payload size must be a multiple of condition size")
    group = w1.size // cond.size
    ca = b2a(eng, cond, w1.ring)
    if group > 1:
        ca = AVec(w1.ring, np.repeat(ca.lo.ravel(), group), np.repeat(ca.hi.ravel(), group))
    diff = w2.sub(w1).reshape(-1)
    picked = eng.mul(diff, ca.reshape(-1), tag="select.mul")
    return w1.add(picked.reshape(w1.shape))


def needs_select(cond_count: int, width: int) -> Needs:
    return Needs().bump(dabit_key(width), cond_count)


def truncate(eng: PartyEngine, x: AVec, k: int, signed: bool = False) -> AVec:
    """Shares of floor(x / 2^k), exact.

    Unsigned: exact for every x in [0, 2^l).  Signed: exact arithmetic shift
    for |x| < 2^{l-2} (bias-and-shift).  Uses one truncation pair; the wrap
    and low-borrow bits both fall out of a single borrow scan.
    """
    ring = x.ring
    if not 0 <= k < ring.width:
        raise ValueError(f"truncation amount {k} out of range for width {ring.width}")
    if k == 0:
        return x.copy()
    if signed:
        bias = 1 << (ring.width - 2)
        shifted = truncate(eng, eng.add_pub(x, bias), k, signed=False)
        return eng.sub_pub(shifted, bias >> k)
    shape = x.shape
    flat = x.ravel()
    r, (blo, bhi), rshift = _store(eng).take_truncpairs(ring, k, flat.size)
    c = eng.open_a(flat.add(r), tag="trunc.open")
    s = _borrow_scan(eng, c, blo, bhi, ring.width)
    wrap = BitVec(s.lo[ring.width - 1], s.hi[ring.width - 1])
    low_borrow = BitVec(s.lo[k - 1], s.hi[k - 1])
    conv = b2a(eng, concat_bits([wrap, low_borrow]).reshape(2, -1), ring)
    wrap_a = conv.take(0)
    beta_a = conv.take(1)
    out = wrap_a.mul_public((1 << (ring.width - k)) & ring.mask).sub(rshift).sub(beta_a)
    out = eng.add_pub(out, (c >> np.uint64(k)).astype(np.uint64))
    return out.reshape(shape)


def needs_truncate(count: int, width: int, k: int, signed: bool = False) -> Needs:
    if k == 0:
        return Needs()
    return Needs().bump(trunc_key(width, k), count).bump(dabit_key(width), 2 * count)


def div_params(width: int, tau: int) -> Dict[str, int]:
    """Public fixed-point division schedule derived from (l, tau)."""
    bound = width - tau - 2  # operands live below 2^bound
    ti = tau + 4  # internal reciprocal precision
    sigma = max(0, bound + ti + 5 - width)  # dividend pre-shift for headroom
    kf = bound + ti - sigma - tau  # final rescale
    iters = math.ceil(math.log2(tau)) + 2 if tau > 1 else 2
    if ti >= bound or kf < 1:
        raise ValueError(f"division unsupported at width {width}, tau {tau}")
    w0 = round(2.9142 * (1 << ti))
    return {"bound": bound, "ti": ti, "sigma": sigma, "kf": kf, "iters": iters, "w0": w0}


def division(eng: PartyEngine, p: AVec, q: AVec, tau: int) -> AVec:
    """Fixed-point shares of (p/q) * 2^tau for q >= 1, p, q < 2^{l-tau-2}.

    Divisor is normalized into [2^{B-1}, 2^B) by a comparison ladder against
    public powers of two (the scale factor is a linear combination of the
    ladder bits), then a fixed Newton schedule refines the reciprocal at
    tau+4 fractional bits; a half-ulp offset before the final truncation
    makes the last step round to nearest.
    """
    ring = p.ring
    pr = div_params(ring.width, tau)
    bound, ti, sigma, kf, iters, w0 = (pr[k] for k in ("bound", "ti", "sigma", "kf", "iters", "w0"))
    shape = p.shape
    pf = p.ravel()
    qf = q.ravel()
    n = qf.size

    # ladder bits t_j = [q >= 2^j], j = 1..bound-1
    ladder = bound - 1
    qrep = qf.tile(ladder)
    powers = np.repeat((np.uint64(1) << np.arange(1, bound, dtype=np.uint64)), n)
    below = lt(eng, qrep, powers)
    t_arith = b2a(eng, eng.bnot(below), ring).reshape(ladder, n)
    # v = 2^{B-1} - sum_j t_j 2^{B-1-j} equals 2^{B - bitlen(q)}
    coeffs = (np.uint64(1) << np.arange(bound - 2, -1, -1, dtype=np.uint64))[:, None]
    v = eng.rsub_pub(1 << (bound - 1), AVec(ring, ring.reduce((t_arith.lo * coeffs).sum(axis=0)),
                                            ring.reduce((t_arith.hi * coeffs).sum(axis=0))))

    qn = eng.mul(qf, v, tag="div.mul")
    qnorm = truncate(eng, qn, bound - ti)  # in [2^{ti-1}, 2^{ti})
    w = eng.rsub_pub(w0, qnorm.mul_public(2))
    for _ in range(iters):
        e = eng.rsub_pub(1 << (ti + 1), truncate(eng, eng.mul(qnorm, w, tag="div.mul"), ti))
        w = truncate(eng, eng.mul(w, e, tag="div.mul"), ti)

    pn = eng.mul(pf, v, tag="div.mul")
    if sigma:
        pn = truncate(eng, pn, sigma)
    prod = eng.add_pub(eng.mul(pn, w, tag="div.mul"), 1 << (kf - 1))
    return truncate(eng, prod, kf).reshape(shape)


def needs_division(count: int, width: int, tau: int) -> Needs:
    pr = div_params(width, tau)
    needs = Needs()
    ladder = pr["bound"] - 1
    needs.merge(needs_lt(ladder * count, width))
    needs.merge(needs_b2a(ladder * count, width))
    needs.merge(needs_truncate(count, width, pr["bound"] - pr["ti"]))
    needs.merge(needs_truncate(2 * pr["iters"] * count, width, pr["ti"]))
    if pr["sigma"]:
        needs.merge(needs_truncate(count, width, pr["sigma"]))
    needs.merge(needs_truncate(count, width, pr["kf"]))
    return needs


def argmin_masked(eng: PartyEngine, scores: AVec, avail: BitVec, worst: int,
                  idx_ring: Ring = RING64) -> AVec:
    """Index of the smallest masked-in score per row; ties to the lower index.

    scores: (n, m) fixed-point, avail: (n, m) boolean shares.  Masked-out
    entries are replaced by the public ceiling `worst`, which must exceed
    every genuine score; an all-masked row therefore resolves to index 0.
    Tournament pairs adjacent survivors so the lowest-index rule survives
    every round.
    """
    if scores.shape != avail.shape or len(scores.shape) != 2:
        raise ValueError("scores and mask must be matching 2-d arrays")
    n, m = scores.shape
    ring = scores.ring
    ceil_vec = eng.const_a(np.full(n * m, worst, dtype=np.uint64), ring).reshape(n, m)
    vals = select_share(eng, ceil_vec, scores, avail)
    idxs = eng.const_a(np.broadcast_to(np.arange(m, dtype=np.uint64), (n, m)).copy(), idx_ring)
    while m > 1:
        pairs = m // 2
        a_v = vals.take((slice(None), slice(0, 2 * pairs, 2)))
        b_v = vals.take((slice(None), slice(1, 2 * pairs, 2)))
        a_i = idxs.take((slice(None), slice(0, 2 * pairs, 2)))
        b_i = idxs.take((slice(None), slice(1, 2 * pairs, 2)))
        challenger_wins = lt(eng, b_v, a_v)
        new_v = select_share(eng, a_v, b_v, challenger_wins)
        new_i = select_share(eng, a_i, b_i, challenger_wins)
        if m % 2:
            new_v = concat_avec([new_v.reshape(-1), vals.take((slice(None), slice(2 * pairs, m))).reshape(-1)])
            new_i = concat_avec([new_i.reshape(-1), idxs.take((slice(None), slice(2 * pairs, m))).reshape(-1)])
            # restore row-major (n, pairs+1) layout after the flat concat
            new_v = _interleave_carry(new_v, n, pairs)
            new_i = _interleave_carry(new_i, n, pairs)
        vals = new_v.reshape(n, -1)
        idxs = new_i.reshape(n, -1)
        m = vals.shape[1]
    return idxs.reshape(n)


def _interleave_carry(flat: AVec, n: int, pairs: int) -> AVec:
    main_lo = flat.lo[: n * pairs].reshape(n, pairs)
    main_hi = flat.hi[: n * pairs].reshape(n, pairs)
    carry_lo = flat.lo[n * pairs :].reshape(n, 1)
    carry_hi = flat.hi[n * pairs :].reshape(n, 1)
    return AVec(flat.ring, np.concatenate([main_lo, carry_lo], axis=1),
                np.concatenate([main_hi, carry_hi], axis=1))


def needs_argmin(n: int, m: int, score_width: int, idx_width: int) -> Needs:
    needs = Needs()
    needs.merge(needs_select(n * m, score_width))  # masking pass
    while m > 1:
        pairs = m // 2
        needs.merge(needs_lt(n * pairs, score_width))
        needs.merge(needs_select(n * pairs, score_width))
        needs.merge(needs_select(n * pairs, idx_width))
        m = pairs + (m % 2)
    return needs
