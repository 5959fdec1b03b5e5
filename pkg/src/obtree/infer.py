"""Secure batch inference over a shared tree.

Every query walks the complete tree for exactly `depth` iterations: fetch
the current slot's payload (a feature index at inner levels, the label at
the last), fetch the query's bit for that feature, descend.  Leaf and dummy
slots hold placeholder features, so dummy chains are walked like any other
path and the label at the bottom of the chain is the answer.  The final
iteration's feature fetch is dead work kept for shape uniformity.
"""

from __future__ import annotations

from typing import List

from .gadgets import Needs
from .oaa import needs_oaa, oaa, row_lookup
from .rss import AVec, PartyEngine


def infer_batch(eng: PartyEngine, levels: List[AVec], queries: AVec) -> AVec:
    """levels: per-level payload vectors (sizes 1, 2, 4, ...); queries (n, d-1)."""
    n_queries, nf = queries.shape
    ring = levels[0].ring
    import numpy as np

    slot = eng.const_a(np.zeros(n_queries, dtype=np.uint64), ring)
    result = None
    for t, table in enumerate(levels):
        with eng.phase(f"walk:{t}"):
            local = eng.sub_pub(slot, (1 << t) - 1)
            payload = oaa(eng, table, local)
            branch = row_lookup(eng, queries, payload)
            slot = eng.add_pub(slot.mul_public(2).add(branch), 1)
            result = payload
    return result


def inference_needs(n_queries: int, depth: int, n_columns: int, width: int = 64) -> Needs:
    needs = Needs()
    for t in range(depth):
        needs.merge(needs_oaa(n_queries, 1 << t, width))
        needs.merge(needs_oaa(n_queries, n_columns - 1, width))
    return needs
