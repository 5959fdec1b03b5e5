import numpy as np
import pytest

from helpers import open_u64, run_dealer, share_in
from obtree.dealer import generate_material
from obtree.infer import infer_batch, inference_needs
from obtree.ring import RING64
from obtree.rss import run_local
from obtree.train import levels_of
from obtree.transport import SeedSetup
from obtree import tree as tree_mod


def _walk(tree, queries):
    return np.array([tree_mod.plaintext_infer(tree, q) for q in queries], dtype=np.uint64)


def _run_infer(tree, queries, **kw):
    depth = tree.depth

    def body(eng):
        t = share_in(eng, tree.T, RING64, "T")
        q = share_in(eng, queries, RING64, "q")
        return infer_batch(eng, levels_of(t, depth), q)

    return run_dealer(body, **kw)


def test_matches_plaintext_walk_on_random_trees():
    rng = np.random.default_rng(21)
    for trial in range(8):
        depth = int(rng.integers(1, 7))
        d = int(rng.integers(2, 9))
        tree = tree_mod.random_tree(rng, depth, d)
        queries = rng.integers(0, 2, (60, d - 1), dtype=np.uint8)
        run = _run_infer(tree, queries)
        got = open_u64(run.results, RING64)
        assert np.array_equal(got, _walk(tree, queries)), trial


def test_single_query_and_single_level():
    rng = np.random.default_rng(22)
    tree = tree_mod.random_tree(rng, 1, 3)
    run = _run_infer(tree, np.array([[0, 1]], dtype=np.uint8))
    got = open_u64(run.results, RING64)
    assert got.tolist() == [int(tree.T[0])]


def test_walk_touches_every_level_obliviously():
    # Even queries that settle early keep issuing one lookup per level.
    rng = np.random.default_rng(23)
    tree = tree_mod.random_tree(rng, 4, 4)
    queries = rng.integers(0, 2, (5, 3), dtype=np.uint8)
    run = _run_infer(tree, queries)
    tags = {r[4] for r in run.transcript.records}
    assert {"walk:0", "walk:1", "walk:2", "walk:3"} <= tags


def test_needs_mirror_consumption():
    rng = np.random.default_rng(24)
    tree = tree_mod.random_tree(rng, 4, 6)
    queries = rng.integers(0, 2, (33, 5), dtype=np.uint8)
    needs = inference_needs(33, 4, 6)
    stores = generate_material(needs, b"\x21" * 16)

    def body(eng):
        t = share_in(eng, tree.T, RING64, "T")
        q = share_in(eng, queries, RING64, "q")
        return infer_batch(eng, levels_of(t, 4), q)

    run_local(body, seeds=SeedSetup.from_int(5), materials=stores)
    assert stores[0].consumed == needs


def test_transcript_shape_ignores_query_values():
    rng = np.random.default_rng(25)
    tree = tree_mod.random_tree(rng, 3, 4)
    shapes = []
    for fill in (0, 1):
        queries = np.full((7, 3), fill, dtype=np.uint8)
        run = _run_infer(tree, queries)
        shapes.append([(r[0], r[1], r[2], r[3]) for r in run.transcript.records])
    assert shapes[0] == shapes[1]


def test_chunked_walk_equivalence():
    rng = np.random.default_rng(26)
    tree = tree_mod.random_tree(rng, 5, 5)
    queries = rng.integers(0, 2, (40, 4), dtype=np.uint8)
    wide = open_u64(_run_infer(tree, queries).results, RING64)
    narrow = open_u64(_run_infer(tree, queries, lane_limit=128).results, RING64)
    assert np.array_equal(wide, narrow)
    assert np.array_equal(wide, _walk(tree, queries))
