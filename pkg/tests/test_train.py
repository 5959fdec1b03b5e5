import numpy as np
import pytest

from helpers import assert_tree_acceptable, oracle_for, secure_train
from obtree.dealer import generate_material
from obtree.ring import RING64
from obtree.train import (
    TrainConfig,
    counter_shift,
    levels_of,
    resolved_depth,
    training_needs,
)


@pytest.mark.parametrize("heuristic", ["tee", "mpc"])
def test_random_datasets_match_oracle(heuristic):
    rng = np.random.default_rng(42)
    for trial in range(10):
        n = int(rng.integers(4, 150))
        d = int(rng.integers(2, 8))
        depth = int(rng.integers(1, 5))
        data = rng.integers(0, 2, (n, d), dtype=np.uint8)
        seed = bytes([trial + 1]) * 16
        ref = oracle_for(data, depth, seed)
        T, F, got_depth, _ = secure_train(data, TrainConfig(depth=depth, heuristic=heuristic), seed)
        assert got_depth == depth
        assert_tree_acceptable(data, depth, ref, T, F, heuristic)


@pytest.mark.parametrize("heuristic", ["tee", "mpc"])
def test_skewed_datasets(heuristic):
    # Constant labels and constant columns exercise the pure and
    # empty-branch paths.
    rng = np.random.default_rng(9)
    for trial in range(5):
        n = int(rng.integers(4, 60))
        d = int(rng.integers(2, 6))
        data = np.zeros((n, d), dtype=np.uint8)
        data[:, int(rng.integers(0, d))] = rng.integers(0, 2, n)
        seed = bytes([trial + 50]) * 16
        ref = oracle_for(data, 3, seed)
        T, F, _, _ = secure_train(data, TrainConfig(depth=3, heuristic=heuristic), seed)
        assert_tree_acceptable(data, 3, ref, T, F, heuristic)


def test_depth_one_is_shared_majority_vote():
    data = np.array([[0, 1], [1, 1], [0, 1], [1, 0]], dtype=np.uint8)
    for heuristic in ("tee", "mpc"):
        T, F, _, _ = secure_train(data, TrainConfig(depth=1, heuristic=heuristic), b"\x0a" * 16)
        assert T.tolist() == [1] and F.tolist() == [1]


def test_counter_scaling_large_dataset():
    assert counter_shift(1500, TrainConfig()) == 1
    rng = np.random.default_rng(4)
    data = rng.integers(0, 2, (1500, 5), dtype=np.uint8)
    seed = b"\x0b" * 16
    ref = oracle_for(data, 3, seed)
    for heuristic in ("tee", "mpc"):
        T, F, _, _ = secure_train(data, TrainConfig(depth=3, heuristic=heuristic), seed)
        assert_tree_acceptable(data, 3, ref, T, F, heuristic)


def test_grow_policy_stops_on_unanimous_leaves():
    data = np.zeros((40, 4), dtype=np.uint8)
    data[:, 0] = np.arange(40) % 2  # features vary, label constant
    cfg = TrainConfig(depth=1, heuristic="mpc", policy="grow", max_depth=3)
    T, F, depth, _ = secure_train(data, cfg, b"\x0c" * 16)
    assert depth == 1
    assert F.tolist() == [1] and T.tolist() == [0]


def test_grow_policy_runs_to_cap():
    rng = np.random.default_rng(5)
    data = rng.integers(0, 2, (80, 4), dtype=np.uint8)
    seed = b"\x0d" * 16
    cfg = TrainConfig(depth=1, heuristic="tee", policy="grow", max_depth=3)
    T, F, depth, _ = secure_train(data, cfg, seed)
    assert depth == 3
    ref = oracle_for(data, 3, seed)
    assert np.array_equal(T, ref.T) and np.array_equal(F, ref.F)


def test_feature_cap_policy_uses_column_count():
    cfg = TrainConfig(depth=1, heuristic="tee", policy="feature_cap")
    assert resolved_depth(cfg, 4) == 4
    rng = np.random.default_rng(6)
    data = rng.integers(0, 2, (80, 4), dtype=np.uint8)
    seed = b"\x0e" * 16
    T, F, depth, _ = secure_train(data, cfg, seed)
    assert depth == 4
    ref = oracle_for(data, 4, seed)
    assert np.array_equal(T, ref.T) and np.array_equal(F, ref.F)


@pytest.mark.parametrize("heuristic", ["tee", "mpc"])
def test_file_provisioned_material(heuristic):
    rng = np.random.default_rng(7)
    data = rng.integers(0, 2, (100, 5), dtype=np.uint8)
    cfg = TrainConfig(depth=3, heuristic=heuristic)
    needs = training_needs(100, 5, cfg)
    stores = generate_material(needs, b"\x0f" * 16)
    seed = b"\x10" * 16
    ref = oracle_for(data, 3, seed)
    T, F, _, _ = secure_train(data, cfg, seed, materials=stores)
    assert_tree_acceptable(data, 3, ref, T, F, heuristic)


def test_levels_of_slices_heap_layout():
    vec = share_in_dummy()
    parts = levels_of(vec, 3)
    assert [p.size for p in parts] == [1, 2, 4]


def share_in_dummy():
    from obtree.rss import AVec

    return AVec(RING64, np.arange(7, dtype=np.uint64), np.zeros(7, dtype=np.uint64))


@pytest.mark.parametrize("heuristic", ["tee", "mpc"])
def test_transcript_shape_ignores_dataset_values(heuristic):
    shapes = []
    for variant in (0, 1):
        rng = np.random.default_rng(100 + variant)
        data = rng.integers(0, 2, (50, 4), dtype=np.uint8)
        _, _, _, run = secure_train(data, TrainConfig(depth=3, heuristic=heuristic), b"\x11" * 16)
        shapes.append([(r[0], r[1], r[2], r[3], r[4]) for r in run.transcript.records])
    assert shapes[0] == shapes[1]


def test_phase_tags_cover_level_loop():
    rng = np.random.default_rng(8)
    data = rng.integers(0, 2, (60, 4), dtype=np.uint8)
    _, _, _, run = secure_train(data, TrainConfig(depth=3, heuristic="mpc"), b"\x12" * 16)
    tags = set(run.metrics.bytes_by_tag)
    for want in ("count:0", "count:1", "partition:1", "hc_mpc:0", "split:0", "labels:2"):
        assert want in tags, (want, sorted(tags))
