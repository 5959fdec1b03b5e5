"""Oblivious array access: fetch table[idx] without revealing idx.

One lookup against an m-entry shared table costs m equality lanes (shared
index against the public ramp 0..m-1) plus m select lanes, then a local
segmented sum.  An out-of-range index matches nothing and yields an exact
zero share.  Lane count n*m is chunked against the engine's lane limit;
chunk boundaries are public, so the transcript shape depends only on sizes.
"""

from __future__ import annotations

from typing import Union

import numpy as np

from .gadgets import Needs, eq, needs_eq, needs_select, select_share
from .rss import AVec, PartyEngine, concat_avec


def oaa(eng: PartyEngine, table: AVec, idx: AVec) -> AVec:
    """Shares of table[idx] per index; zero where idx is out of range."""
    if len(table.shape) != 1:
        raise ValueError("table must be one-dimensional")
    m = table.size
    flat_idx = idx.ravel()
    ramp = np.arange(m, dtype=np.uint64)
    out = []
    for lo, hi in _chunks(flat_idx.size, m, eng.lane_limit):
        span = hi - lo
        idx_rep = flat_idx.take(slice(lo, hi)).repeat(m)
        hit = eq(eng, idx_rep, np.tile(ramp, span))
        rows = table.tile(span)
        picked = select_share(eng, eng.zero_like(rows), rows, hit)
        out.append(picked.reshape(span, m).sum(axis=1))
    return concat_avec(out).reshape(idx.shape)


def row_lookup(eng: PartyEngine, rows: AVec, idx: AVec) -> AVec:
    """Per-row table lookup: out[i] = rows[i][idx[i]]; zero out of range."""
    if len(rows.shape) != 2:
        raise ValueError("rows must be two-dimensional")
    n, m = rows.shape
    flat_idx = idx.ravel()
    if flat_idx.size != n:
        raise ValueError("one index per row required")
    ramp = np.arange(m, dtype=np.uint64)
    out = []
    for lo, hi in _chunks(n, m, eng.lane_limit):
        span = hi - lo
        idx_rep = flat_idx.take(slice(lo, hi)).repeat(m)
        hit = eq(eng, idx_rep, np.tile(ramp, span))
        block = rows.take(slice(lo, hi)).reshape(-1)
        picked = select_share(eng, eng.zero_like(block), block, hit)
        out.append(picked.reshape(span, m).sum(axis=1))
    return concat_avec(out).reshape(idx.shape)


def _chunks(n: int, m: int, lane_limit: int):
    step = max(1, lane_limit // max(m, 1))
    for lo in range(0, n, step):
        yield lo, min(lo + step, n)
    if n == 0:
        return


def needs_oaa(count: int, m: int, width: int) -> Needs:
    """Material for `count` lookups against an m-entry table."""
    needs = Needs()
    needs.merge(needs_eq(count * m, width))
    needs.merge(needs_select(count * m, width))
    return needs
