import filecmp
import json
from pathlib import Path

import numpy as np
import pytest

from obtree import cli
from obtree.cli import UsageError, parse_hosts, parse_seed
from obtree.tree import TreeState, load_csv, plaintext_infer, plaintext_train, save_csv


def write_data(path, n=48, d=6, seed=3):
    rng = np.random.default_rng(seed)
    data = rng.integers(0, 2, size=(n, d)).astype(np.uint8)
    save_csv(path, data)
    return data


def test_parse_seed_forms():
    assert parse_seed("7") == (7).to_bytes(16, "little")
    assert parse_seed("0xff") == b"\xff"
    assert parse_seed("deadbeef") == bytes.fromhex("deadbeef")
    with pytest.raises(UsageError):
        parse_seed("not-a-seed")
    with pytest.raises(UsageError):
        parse_seed("0x")


def test_parse_hosts_shapes():
    hosts = parse_hosts("a:1, b:2 ,c:3")
    assert hosts == {1: ("a", 1), 2: ("b", 2), 3: ("c", 3)}
    with pytest.raises(UsageError):
        parse_hosts("a:1,b:2")
    with pytest.raises(UsageError):
        parse_hosts("a:x,b:2,c:3")


def test_trusted_path_train_matches_oracle(tmp_path):
    data = write_data(tmp_path / "data.csv")
    out = tmp_path / "run"
    code = cli.main(["train", "--data", str(tmp_path / "data.csv"),
                     "--out", str(out), "--depth", "3", "--heuristic", "tee",
                     "--seed", "11", "--profile", "test", "--reveal"])
    assert code == 0
    got = TreeState.from_json((out / "tree.json").read_text())
    want = plaintext_train(data, 3, parse_seed("11"))
    assert np.array_equal(got.T, want.T)
    assert np.array_equal(got.F, want.F)
    meta = json.loads((out / "tree_meta.json").read_text())
    assert meta == {"depth": 3, "n_columns": 6, "heuristic": "tee"}
    metrics = json.loads((out / "metrics.json").read_text())
    assert metrics["total_bytes"] > 0 and metrics["rounds"] > 0


def test_deal_then_train_then_infer(tmp_path):
    data = write_data(tmp_path / "data.csv", n=40, d=5, seed=9)
    deal = tmp_path / "deal"
    assert cli.main(["deal", "--data", str(tmp_path / "data.csv"),
                     "--out", str(deal), "--depth", "2", "--heuristic", "tee",
                     "--seed", "21"]) == 0
    for i in (1, 2, 3):
        pdir = deal / f"party{i}"
        for name in ("seeds.json", "material.bin", "features.shr", "labels.shr"):
            assert (pdir / name).exists()
    # no single party directory may hold the master seed
    for i in (1, 2, 3):
        blob = (deal / f"party{i}" / "seeds.json").read_text()
        assert parse_seed("21").hex() not in blob

    run = tmp_path / "run"
    assert cli.main(["train", "--deal-dir", str(deal), "--out", str(run),
                     "--depth", "2", "--heuristic", "tee", "--seed", "21",
                     "--profile", "test", "--reveal"]) == 0
    tree = TreeState.from_json((run / "tree.json").read_text())
    want = plaintext_train(data, 2, parse_seed("21"))
    assert np.array_equal(tree.T, want.T) and np.array_equal(tree.F, want.F)

    queries = write_data(tmp_path / "queries.csv", n=12, d=4, seed=5)
    pred_dir = tmp_path / "preds"
    assert cli.main(["infer", "--queries", str(tmp_path / "queries.csv"),
                     "--tree-dir", str(run), "--out", str(pred_dir),
                     "--seed", "4", "--profile", "test", "--reveal"]) == 0
    got = load_csv(pred_dir / "predictions.csv", min_columns=1).ravel()
    want_preds = [plaintext_infer(tree, q) for q in queries]
    assert list(got) == want_preds


def test_infer_from_plaintext_tree(tmp_path):
    rng = np.random.default_rng(2)
    from obtree.tree import random_tree
    state = random_tree(rng, 3, 5)
    (tmp_path / "tree.json").write_text(state.to_json())
    queries = write_data(tmp_path / "q.csv", n=9, d=4, seed=8)
    out = tmp_path / "out"
    assert cli.main(["infer", "--queries", str(tmp_path / "q.csv"),
                     "--tree", str(tmp_path / "tree.json"), "--out", str(out),
                     "--seed", "3", "--profile", "test", "--reveal"]) == 0
    got = load_csv(out / "predictions.csv", min_columns=1).ravel()
    assert list(got) == [plaintext_infer(state, q) for q in queries]


def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    write_data(tmp_path / "data.csv")
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# run profile\ndepth = 3\nheuristic = tee\nprofile = test\nseed = 11\n")
    out1 = tmp_path / "a"
    assert cli.main(["train", "--data", str(tmp_path / "data.csv"),
                     "--config", str(cfg), "--out", str(out1)]) == 0
    assert json.loads((out1 / "tree_meta.json").read_text())["depth"] == 3

    out2 = tmp_path / "b"
    assert cli.main(["train", "--data", str(tmp_path / "data.csv"),
                     "--config", str(cfg), "--depth", "2", "--out", str(out2)]) == 0
    assert json.loads((out2 / "tree_meta.json").read_text())["depth"] == 2


def test_compare_trusted_path_identical(tmp_path, capsys):
    write_data(tmp_path / "data.csv", n=60, d=5, seed=13)
    assert cli.main(["compare", "--data", str(tmp_path / "data.csv"),
                     "--heuristic", "tee", "--depth", "2", "--seed", "9",
                     "--out", str(tmp_path / "report.json")]) == 0
    out = capsys.readouterr().out
    assert "trees identical: true" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["identical"] is True
    assert report["delta_pp"] == 0.0


def test_compare_mismatch_exit_code(tmp_path):
    write_data(tmp_path / "data.csv", n=60, d=5, seed=13)
    code = cli.main(["compare", "--data", str(tmp_path / "data.csv"),
                     "--heuristic", "mpc", "--depth", "2", "--seed", "9",
                     "--tolerance", "-1"])
    assert code == 3


def test_usage_errors_exit_one(tmp_path):
    write_data(tmp_path / "data.csv")
    data = str(tmp_path / "data.csv")
    cases = [
        ["deal", "--out", str(tmp_path / "o1")],
        ["deal", "--data", data, "--queries", data, "--out", str(tmp_path / "o2")],
        ["train", "--out", str(tmp_path / "o3")],
        ["train", "--data", data, "--out", str(tmp_path / "o4"), "--reveal"],
        ["train", "--data", data, "--out", str(tmp_path / "o5"), "--seed", "zz"],
        ["train", "--data", data, "--out", str(tmp_path / "o6"),
         "--width", "8", "--tau", "7"],
        ["train", "--data", data, "--out", str(tmp_path / "o6b"), "--width", "16"],
        ["train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o7")],
        ["infer", "--queries", data, "--out", str(tmp_path / "o8")],
    ]
    for argv in cases:
        assert cli.main(argv) == 1, argv


def test_material_shortfall_exits_two(tmp_path):
    write_data(tmp_path / "data.csv", n=32, d=4, seed=4)
    deal = tmp_path / "deal"
    assert cli.main(["deal", "--data", str(tmp_path / "data.csv"),
                     "--out", str(deal), "--depth", "2", "--seed", "6"]) == 0
    # provisioned for depth 2; asking for depth 3 runs the bank dry
    code = cli.main(["train", "--deal-dir", str(deal), "--out", str(tmp_path / "run"),
                     "--depth", "3", "--seed", "6"])
    assert code == 2


def test_training_outputs_are_deterministic(tmp_path):
    write_data(tmp_path / "data.csv", n=36, d=5, seed=17)
    argv = ["train", "--data", str(tmp_path / "data.csv"), "--depth", "2",
            "--seed", "33", "--heuristic", "mpc"]
    assert cli.main(argv + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(argv + ["--out", str(tmp_path / "b")]) == 0
    names = ["tree_meta.json", "metrics.json"] + [
        f"party{i}/{f}" for i in (1, 2, 3) for f in ("tree_T.shr", "tree_F.shr")]
    for name in names:
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False), name


def test_binarize_mixed_columns(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text(
        "1,3.5,red,yes,0\n"
        "0,1.0,green,no,1\n"
        "1,9.9,blue,yes,1\n"
        "0,2.0,red,no,0\n")
    out = tmp_path / "bin.csv"
    assert cli.main(["binarize", str(raw), str(out),
                     "--mapping", str(tmp_path / "map.json")]) == 0
    data = load_csv(out)
    # binary kept, numeric split at median 2.75, 3 colors one-hot, yes/no 0/1, label last
    assert data.shape == (4, 7)
    assert list(data[:, 0]) == [1, 0, 1, 0]
    assert list(data[:, 1]) == [1, 0, 1, 0]
    # one-hot columns in sorted category order: blue, green, red
    assert [list(r) for r in data[:, 2:5]] == [[0, 0, 1], [0, 1, 0], [1, 0, 0], [0, 0, 1]]
    assert list(data[:, 5]) == [1, 0, 1, 0]
    assert list(data[:, 6]) == [0, 1, 1, 0]
    mapping = json.loads((tmp_path / "map.json").read_text())
    kinds = [m["kind"] for m in mapping]
    assert kinds == ["binary", "threshold", "one_hot", "one_hot", "one_hot",
                     "binary_categorical"]


def test_binarize_threshold_override_and_bad_label(tmp_path):
    raw = tmp_path / "raw.csv"
    raw.write_text("5,0\n1,1\n9,2\n")
    assert cli.main(["binarize", str(raw), str(tmp_path / "o.csv")]) == 1  # 3-valued label
    raw.write_text("5,0\n1,1\n9,0\n")
    assert cli.main(["binarize", str(raw), str(tmp_path / "o.csv"),
                     "--threshold", "0=4"]) == 0
    data = load_csv(tmp_path / "o.csv")
    assert list(data[:, 0]) == [1, 0, 1]


def test_bench_oaa_reports_reference_ratio(tmp_path):
    out = tmp_path / "bench.json"
    assert cli.main(["bench", "--suite", "oaa", "--sizes", "2,4", "--lookups", "32",
                     "--width", "32", "--seed", "2", "--out", str(out)]) == 0
    rows = json.loads(out.read_text())
    assert len(rows) == 2
    for row in rows:
        assert row["ratio"] <= 2.0
        assert row["party_bits"] == row["bits_per_lookup"] * 32
