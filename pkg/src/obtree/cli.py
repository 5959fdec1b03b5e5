"""Command line front end: dealing, training, inference, comparison, benchmarks.

One binary with a subcommand per role.  The default transport is in-process
(all three engines in one process, used for tests and local experiments); a
``--party`` flag switches a process into one seat of a TCP mesh, with the
trusted heuristic endpoint served separately by ``obtree enclave``.

Exit codes: 0 success, 1 usage or input problem, 2 protocol failure,
3 verification mismatch (``compare``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tree as tree_mod
from .dealer import LiveDealer, MaterialStore, generate_material, share_values
from .enclave import EnclaveError, EnclaveService, serve_tcp
from .gadgets import MaterialError
from .infer import infer_batch, inference_needs
from .oaa import needs_oaa, oaa
from .ring import RING64, Ring, RingError
from .rss import (
    AVec,
    PartyEngine,
    ShareError,
    read_share_file,
    run_local,
    write_share_file,
)
from .train import TrainConfig, levels_of, resolved_depth, train_tree, training_needs
from .transport import (
    Metrics,
    SeedSetup,
    TcpChannel,
    TransportError,
    derive_seed,
)
from .tree import DataError, TreeError, TreeState

log = logging.getLogger("obtree")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PROTOCOL = 2
EXIT_MISMATCH = 3

PARTIES = (1, 2, 3)


class UsageError(Exception):
    """Bad flags, bad config, or missing inputs."""


class CompareMismatch(Exception):
    """Raised by cmd_compare when the verification condition fails."""


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Knobs shared by the protocol-running commands."""

    width: int = 32
    tau: int = 10
    depth: int = 4
    policy: str = "fixed"
    max_depth: Optional[int] = None
    heuristic: str = "mpc"
    mode: str = "inproc"
    party: Optional[int] = None
    hosts: Dict[int, Tuple[str, int]] = field(default_factory=dict)
    enclave_addr: Optional[Tuple[str, int]] = None
    seed: bytes = bytes(16)
    reveal: bool = False
    profile: str = "prod"
    lane_limit: int = 1 << 22
    timeout: float = 300.0

    def validate(self) -> None:
        if self.width < 8 or self.width > 64:
            raise UsageError("score ring width must be between 8 and 64")
        if not 0 < self.tau < self.width - 2:
            raise UsageError("tau must satisfy 0 < tau < width - 2")
        if self.depth < 1:
            raise UsageError("depth must be at least 1")
        if self.policy not in ("fixed", "grow", "feature_cap"):
            raise UsageError(f"unknown depth policy {self.policy!r}")
        if self.heuristic not in ("mpc", "tee"):
            raise UsageError(f"unknown heuristic path {self.heuristic!r}")
        if self.mode not in ("inproc", "tcp"):
            raise UsageError(f"unknown transport mode {self.mode!r}")
        if self.mode == "tcp":
            if self.party not in PARTIES:
                raise UsageError("tcp mode needs --party 1, 2, or 3")
            if set(self.hosts) != set(PARTIES):
                raise UsageError("tcp mode needs --hosts with three host:port entries")
        if self.reveal and self.profile != "test":
            raise UsageError("--reveal is only honored in the test profile")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            depth=self.depth,
            tau=self.tau,
            heuristic=self.heuristic,
            policy=self.policy,
            max_depth=self.max_depth,
            score_ring=Ring(self.width),
        )


def parse_seed(text: str) -> bytes:
    """Accept a decimal integer or a hex string (with or without 0x)."""
    s = text.strip()
    try:
        return int(s, 10).to_bytes(16, "little", signed=False)
    except (ValueError, OverflowError):
        pass
    s = s[2:] if s.lower().startswith("0x") else s
    try:
        raw = bytes.fromhex(s)
    except ValueError as e:
        raise UsageError(f"seed must be an integer or hex string, got {text!r}") from e
    if not raw:
        raise UsageError("seed must not be empty")
    return raw


def parse_hosts(text: str) -> Dict[int, Tuple[str, int]]:
    """Three comma-separated host:port endpoints, in party order."""
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) != 3:
        raise UsageError("--hosts needs exactly three host:port entries")
    return {i + 1: parse_endpoint(p) for i, p in enumerate(parts)}


def parse_endpoint(text: str) -> Tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise UsageError(f"endpoint must be host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError as e:
        raise UsageError(f"bad port in {text!r}") from e


def load_config_file(path: str) -> Dict[str, str]:
    """Flat key = value file; '#' starts a comment; keys match flag names."""
    out: Dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


def apply_config(args: argparse.Namespace, cfg: Dict[str, str]) -> None:
    """Config supplies defaults; explicit command-line flags win.

    Unset flags are parsed with a None default, so a None attribute means
    the user did not pass the flag.
    """
    for key, value in cfg.items():
        if not hasattr(args, key):
            raise UsageError(f"config key {key!r} does not match any option")
        if getattr(args, key) is not None:
            continue
        current_default = _CONFIG_COERCERS.get(key, str)
        if current_default is bool:
            word = value.lower()
            if word not in _BOOL_WORDS:
                raise UsageError(f"config key {key!r} needs a boolean, got {value!r}")
            setattr(args, key, _BOOL_WORDS[word])
        else:
            try:
                setattr(args, key, current_default(value))
            except (ValueError, UsageError) as e:
                raise UsageError(f"config key {key!r}: {e}") from e


_CONFIG_COERCERS = {
    "width": int,
    "tau": int,
    "depth": int,
    "max_depth": int,
    "lane_limit": int,
    "party": int,
    "rows": str,
    "seed": str,
    "hosts": str,
    "enclave": str,
    "reveal": bool,
    "timeout": float,
    "split": float,
    "tolerance": float,
}


def build_run_config(args: argparse.Namespace) -> RunConfig:
    rc = RunConfig()
    if getattr(args, "width", None) is not None:
        rc.width = args.width
    if getattr(args, "tau", None) is not None:
        rc.tau = args.tau
    if getattr(args, "depth", None) is not None:
        rc.depth = args.depth
    if getattr(args, "policy", None) is not None:
        rc.policy = args.policy
    if getattr(args, "max_depth", None) is not None:
        rc.max_depth = args.max_depth
    if getattr(args, "heuristic", None) is not None:
        rc.heuristic = args.heuristic
    if getattr(args, "party", None) is not None:
        rc.mode = "tcp"
        rc.party = args.party
    if getattr(args, "hosts", None) is not None:
        rc.hosts = parse_hosts(args.hosts)
    if getattr(args, "enclave", None) is not None:
        rc.enclave_addr = parse_endpoint(args.enclave)
    if getattr(args, "seed", None) is not None:
        rc.seed = parse_seed(args.seed)
    if getattr(args, "reveal", None):
        rc.reveal = True
    if getattr(args, "profile", None) is not None:
        rc.profile = args.profile
    if getattr(args, "lane_limit", None) is not None:
        rc.lane_limit = args.lane_limit
    if getattr(args, "timeout", None) is not None:
        rc.timeout = args.timeout
    rc.validate()
    return rc


# ---------------------------------------------------------------------------
# Deal directory layout
# ---------------------------------------------------------------------------

META_NAME = "meta.json"
ENCLAVE_NAME = "enclave.json"
SEEDS_NAME = "seeds.json"
FEATURES_NAME = "features.shr"
LABELS_NAME = "labels.shr"
QUERIES_NAME = "queries.shr"
MATERIAL_NAME = "material.bin"
TREE_T_NAME = "tree_T.shr"
TREE_F_NAME = "tree_F.shr"
TREE_META_NAME = "tree_meta.json"
METRICS_NAME = "metrics.json"


def party_dir(base: Path, party: int) -> Path:
    return base / f"party{party}"


def write_party_seeds(base: Path, setup: SeedSetup) -> None:
    for i in PARTIES:
        prev = PARTIES[(i - 2) % 3]
        doc = {
            "party": i,
            "pair_next": setup.pair_seeds[i].hex(),
            "pair_prev": setup.pair_seeds[prev].hex(),
            "local": setup.local_seeds[i].hex(),
            "filler": setup.filler_seed.hex(),
            "enclave_key": setup.enclave_channel_keys[i].hex(),
        }
        (party_dir(base, i) / SEEDS_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True))
    enc = {
        "seed": setup.enclave_seed.hex(),
        "keys": {str(i): setup.enclave_channel_keys[i].hex() for i in PARTIES},
    }
    (base / ENCLAVE_NAME).write_text(json.dumps(enc, indent=2, sort_keys=True))


def read_party_seeds(path: Path) -> SeedSetup:
    """Rebuild a seed view from one party's file; absent slots stay empty."""
    doc = json.loads(path.read_text())
    party = int(doc["party"])
    prev = PARTIES[(party - 2) % 3]
    return SeedSetup(
        master=b"",
        pair_seeds={party: bytes.fromhex(doc["pair_next"]),
                    prev: bytes.fromhex(doc["pair_prev"])},
        local_seeds={party: bytes.fromhex(doc["local"])},
        enclave_seed=b"",
        filler_seed=bytes.fromhex(doc["filler"]),
        enclave_channel_keys={party: bytes.fromhex(doc["enclave_key"])},
    )


def assemble_seeds(base: Path) -> SeedSetup:
    """Rebuild the full seed setup from all three party files (inproc runs)."""
    pair: Dict[int, bytes] = {}
    local: Dict[int, bytes] = {}
    filler = b""
    for i in PARTIES:
        doc = json.loads((party_dir(base, i) / SEEDS_NAME).read_text())
        pair[i] = bytes.fromhex(doc["pair_next"])
        local[i] = bytes.fromhex(doc["local"])
        filler = bytes.fromhex(doc["filler"])
    enc = json.loads((base / ENCLAVE_NAME).read_text())
    return SeedSetup(
        master=b"",
        pair_seeds=pair,
        local_seeds=local,
        enclave_seed=bytes.fromhex(enc["seed"]),
        filler_seed=filler,
        enclave_channel_keys={i: bytes.fromhex(enc["keys"][str(i)]) for i in PARTIES},
    )


def write_shared(base: Path, name: str, values: np.ndarray, seed: bytes, label: str) -> None:
    pairs = share_values(values, RING64, derive_seed(seed, label))
    for i in PARTIES:
        lo, hi = pairs[i - 1]
        write_share_file(str(party_dir(base, i) / name), lo, hi, RING64, i)


def read_shared(path: Path, shape: Tuple[int, ...]) -> AVec:
    lo, hi, ring, _party = read_share_file(str(path))
    return AVec(ring, lo, hi).reshape(shape)


# ---------------------------------------------------------------------------
# deal
# ---------------------------------------------------------------------------


def cmd_deal(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    if (args.data is None) == (args.queries is None):
        raise UsageError("deal needs exactly one of --data or --queries")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in PARTIES:
        party_dir(out, i).mkdir(exist_ok=True)
    setup = SeedSetup.from_master(rc.seed)
    write_party_seeds(out, setup)

    meta: Dict[str, object] = {
        "width": rc.width,
        "tau": rc.tau,
        "policy": rc.policy,
        "heuristic": rc.heuristic,
    }
    if args.data is not None:
        data = tree_mod.load_csv(args.data)
        n, d = data.shape
        depth = resolved_depth(rc.train_config(), d)
        needs = training_needs(n, d, rc.train_config())
        write_shared(out, FEATURES_NAME, data[:, :-1], rc.seed, "deal/features")
        write_shared(out, LABELS_NAME, data[:, -1], rc.seed, "deal/labels")
        meta.update({"kind": "train", "n_rows": n, "n_columns": d, "depth": depth})
    else:
        queries = tree_mod.load_csv(args.queries, min_columns=1)
        if args.depth is None:
            raise UsageError("dealing queries needs --depth of the target tree")
        n, nf = queries.shape
        depth = rc.depth
        needs = inference_needs(n, depth, nf + 1)
        write_shared(out, QUERIES_NAME, queries, rc.seed, "deal/queries")
        meta.update({"kind": "infer", "n_rows": n, "n_columns": nf + 1, "depth": depth})
        if args.tree is not None:
            state = TreeState.from_json(Path(args.tree).read_text())
            state.validate(n_columns=nf + 1)
            if state.depth != depth:
                raise UsageError("--depth does not match the tree file")
            write_shared(out, TREE_T_NAME, state.T, rc.seed, "deal/tree")
    stores = generate_material(needs, derive_seed(rc.seed, "deal/material"))
    for i in PARTIES:
        stores[i - 1].to_file(str(party_dir(out, i) / MATERIAL_NAME))
    (out / META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"dealt {meta['kind']} shares for {meta['n_rows']} rows into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def open_pair_results(results: Sequence, pick) -> np.ndarray:
    los = [np.asarray(pick(r).lo, dtype=np.uint64) for r in results]
    total = (los[0].astype(object) + los[1] + los[2]) % (1 << 64)
    return np.array(total, dtype=np.uint64)


def write_tree_outputs(out: Path, party: int, T: AVec, F: AVec) -> None:
    party_dir(out, party).mkdir(parents=True, exist_ok=True)
    write_share_file(str(party_dir(out, party) / TREE_T_NAME), T.lo, T.hi, RING64, party)
    write_share_file(str(party_dir(out, party) / TREE_F_NAME), F.lo, F.hi, RING64, party)


def cmd_train(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if rc.mode == "tcp":
        return _train_tcp(args, rc, out)

    if args.deal_dir is not None:
        base = Path(args.deal_dir)
        meta = json.loads((base / META_NAME).read_text())
        if meta.get("kind") != "train":
            raise UsageError(f"{base} was not dealt for training")
        n, d = int(meta["n_rows"]), int(meta["n_columns"])
        setup = assemble_seeds(base)
        stores = [MaterialStore.from_file(str(party_dir(base, i) / MATERIAL_NAME)) for i in PARTIES]
        feats = [read_shared(party_dir(base, i) / FEATURES_NAME, (n, d - 1)) for i in PARTIES]
        labs = [read_shared(party_dir(base, i) / LABELS_NAME, (n,)) for i in PARTIES]

        def body(eng: PartyEngine):
            r = train_tree(eng, feats[eng.party - 1], labs[eng.party - 1], rc.train_config())
            return r.T, r.F, r.depth
    elif args.data is not None:
        data = tree_mod.load_csv(args.data)
        n, d = data.shape
        setup = SeedSetup.from_master(rc.seed)
        dealer = LiveDealer(derive_seed(rc.seed, "live-dealer"))
        stores = [dealer.view(i) for i in PARTIES]
        x_pairs = share_values(data[:, :-1], RING64, derive_seed(rc.seed, "deal/features"))
        y_pairs = share_values(data[:, -1], RING64, derive_seed(rc.seed, "deal/labels"))

        def body(eng: PartyEngine):
            xl, xh = x_pairs[eng.party - 1]
            yl, yh = y_pairs[eng.party - 1]
            X = AVec(RING64, xl.copy(), xh.copy()).reshape((n, d - 1))
            y = AVec(RING64, yl.copy(), yh.copy())
            r = train_tree(eng, X, y, rc.train_config())
            return r.T, r.F, r.depth
    else:
        raise UsageError("train needs --data (live dealer) or --deal-dir")

    svc = EnclaveService(setup.enclave_seed)
    run = run_local(body, seeds=setup, materials=stores,
                    enclave_handler=svc.handler, lane_limit=rc.lane_limit,
                    timeout=rc.timeout)
    depths = {r[2] for r in run.results}
    if len(depths) != 1:
        raise TransportError("parties disagree on the trained depth")
    depth = depths.pop()

    for i in PARTIES:
        T, F, _ = run.results[i - 1]
        write_tree_outputs(out, i, T, F)
    (out / TREE_META_NAME).write_text(json.dumps(
        {"depth": depth, "n_columns": d, "heuristic": rc.heuristic}, indent=2, sort_keys=True))
    (out / METRICS_NAME).write_text(run.metrics.to_json())
    if rc.reveal:
        T = open_pair_results(run.results, lambda r: r[0])
        F = open_pair_results(run.results, lambda r: r[1])
        state = TreeState(depth, T, F)
        state.validate(n_columns=d)
        (out / "tree.json").write_text(state.to_json())
    print(f"trained depth-{depth} tree shares into {out} "
          f"({run.metrics.total_bytes()} bytes, {run.metrics.rounds} rounds)")
    return EXIT_OK


def _train_tcp(args: argparse.Namespace, rc: RunConfig, out: Path) -> int:
    if args.deal_dir is None:
        raise UsageError("tcp training needs --deal-dir with this party's shares")
    base = Path(args.deal_dir)
    meta = json.loads((base / META_NAME).read_text())
    if meta.get("kind") != "train":
        raise UsageError(f"{base} was not dealt for training")
    n, d = int(meta["n_rows"]), int(meta["n_columns"])
    party = rc.party
    assert party is not None
    pdir = party_dir(base, party)
    seeds = read_party_seeds(pdir / SEEDS_NAME)
    store = MaterialStore.from_file(str(pdir / MATERIAL_NAME))
    X = read_shared(pdir / FEATURES_NAME, (n, d - 1))
    y = read_shared(pdir / LABELS_NAME, (n,))

    chan = TcpChannel(party, rc.hosts, enclave_addr=rc.enclave_addr,
                      timeout=rc.timeout,
                      enclave_key=seeds.enclave_channel_keys[party])
    eng = PartyEngine(party, chan, seeds, material=store, lane_limit=rc.lane_limit)
    result = train_tree(eng, X, y, rc.train_config())
    chan.close()

    write_tree_outputs(out, party, result.T, result.F)
    (out / TREE_META_NAME).write_text(json.dumps(
        {"depth": result.depth, "n_columns": d, "heuristic": rc.heuristic}, indent=2, sort_keys=True))
    metrics = Metrics.from_transcript(chan.transcript)
    (party_dir(out, party) / METRICS_NAME).write_text(metrics.to_json())
    print(f"party {party}: trained depth-{result.depth} tree share into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# infer
# ---------------------------------------------------------------------------


def load_tree_shares(tree_dir: Path) -> Tuple[int, int, List[AVec]]:
    meta = json.loads((tree_dir / TREE_META_NAME).read_text())
    depth, d = int(meta["depth"]), int(meta["n_columns"])
    slots = (1 << depth) - 1
    vecs = [read_shared(party_dir(tree_dir, i) / TREE_T_NAME, (slots,)) for i in PARTIES]
    return depth, d, vecs


def cmd_infer(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if rc.mode == "tcp":
        return _infer_tcp(args, rc, out)

    queries = tree_mod.load_csv(args.queries, min_columns=1)
    n, nf = queries.shape
    if args.tree_dir is not None:
        depth, d, tvecs = load_tree_shares(Path(args.tree_dir))
        if d != nf + 1:
            raise UsageError(f"tree expects {d - 1} features, queries have {nf}")
    elif args.tree is not None:
        state = TreeState.from_json(Path(args.tree).read_text())
        state.validate(n_columns=nf + 1)
        depth = state.depth
        pairs = share_values(state.T, RING64, derive_seed(rc.seed, "deal/tree"))
        tvecs = [AVec(RING64, lo, hi) for lo, hi in pairs]
    else:
        raise UsageError("infer needs --tree-dir (shares) or --tree (plaintext)")

    q_pairs = share_values(queries, RING64, derive_seed(rc.seed, "deal/queries"))
    dealer = LiveDealer(derive_seed(rc.seed, "live-dealer"))

    def body(eng: PartyEngine) -> AVec:
        ql, qh = q_pairs[eng.party - 1]
        q = AVec(RING64, ql.copy(), qh.copy()).reshape((n, nf))
        t = tvecs[eng.party - 1]
        t = AVec(RING64, t.lo.copy(), t.hi.copy())
        return infer_batch(eng, levels_of(t, depth), q)

    run = run_local(body, seeds=SeedSetup.from_master(rc.seed),
                    materials=[dealer.view(i) for i in PARTIES],
                    lane_limit=rc.lane_limit, timeout=rc.timeout)
    for i in PARTIES:
        party_dir(out, i).mkdir(exist_ok=True)
        r = run.results[i - 1]
        write_share_file(str(party_dir(out, i) / "predictions.shr"), r.lo, r.hi, RING64, i)
    (out / METRICS_NAME).write_text(run.metrics.to_json())
    if rc.reveal:
        preds = open_pair_results(run.results, lambda r: r)
        tree_mod.save_csv(out / "predictions.csv", preds.reshape(-1, 1))
    print(f"classified {n} queries into {out} "
          f"({run.metrics.total_bytes()} bytes, {run.metrics.rounds} rounds)")
    return EXIT_OK


def _infer_tcp(args: argparse.Namespace, rc: RunConfig, out: Path) -> int:
    if args.deal_dir is None:
        raise UsageError("tcp inference needs --deal-dir with this party's shares")
    base = Path(args.deal_dir)
    meta = json.loads((base / META_NAME).read_text())
    if meta.get("kind") != "infer":
        raise UsageError(f"{base} was not dealt for inference")
    n, d, depth = int(meta["n_rows"]), int(meta["n_columns"]), int(meta["depth"])
    party = rc.party
    assert party is not None
    pdir = party_dir(base, party)
    seeds = read_party_seeds(pdir / SEEDS_NAME)
    store = MaterialStore.from_file(str(pdir / MATERIAL_NAME))
    queries = read_shared(pdir / QUERIES_NAME, (n, d - 1))
    tree_path = pdir / TREE_T_NAME
    if args.tree_dir is not None:
        tree_path = party_dir(Path(args.tree_dir), party) / TREE_T_NAME
    tvec = read_shared(tree_path, ((1 << depth) - 1,))

    chan = TcpChannel(party, rc.hosts, timeout=rc.timeout)
    eng = PartyEngine(party, chan, seeds, material=store, lane_limit=rc.lane_limit)
    preds = infer_batch(eng, levels_of(tvec, depth), queries)
    chan.close()

    party_dir(out, party).mkdir(parents=True, exist_ok=True)
    write_share_file(str(party_dir(out, party) / "predictions.shr"), preds.lo, preds.hi, RING64, party)
    metrics = Metrics.from_transcript(chan.transcript)
    (party_dir(out, party) / METRICS_NAME).write_text(metrics.to_json())
    print(f"party {party}: classified {n} queries into {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def cmd_compare(args: argparse.Namespace) -> int:
    if args.profile is None:
        args.profile = "test"
    rc = build_run_config(args)
    if rc.profile != "test":
        raise UsageError("compare reveals the trained tree and needs the test profile")
    data = tree_mod.load_csv(args.data)
    n, d = data.shape
    split = args.split if args.split is not None else (0.8 if rc.heuristic == "mpc" else 1.0)
    if not 0.0 < split <= 1.0:
        raise UsageError("--split must be in (0, 1]")
    tolerance = args.tolerance if args.tolerance is not None else 4.0

    rng = np.random.default_rng(int.from_bytes(derive_seed(rc.seed, "compare/split")[:8], "little"))
    order = rng.permutation(n)
    n_train = max(1, int(round(n * split)))
    train_rows = data[np.sort(order[:n_train])]
    test_rows = data[np.sort(order[n_train:])] if n_train < n else data

    oracle = tree_mod.plaintext_train(train_rows, resolved_depth(rc.train_config(), d), rc.seed)

    setup = SeedSetup.from_master(rc.seed)
    svc = EnclaveService(setup.enclave_seed)
    dealer = LiveDealer(derive_seed(rc.seed, "live-dealer"))
    x_pairs = share_values(train_rows[:, :-1], RING64, derive_seed(rc.seed, "deal/features"))
    y_pairs = share_values(train_rows[:, -1], RING64, derive_seed(rc.seed, "deal/labels"))

    def body(eng: PartyEngine):
        xl, xh = x_pairs[eng.party - 1]
        yl, yh = y_pairs[eng.party - 1]
        X = AVec(RING64, xl.copy(), xh.copy()).reshape((n_train, d - 1))
        y = AVec(RING64, yl.copy(), yh.copy())
        r = train_tree(eng, X, y, rc.train_config())
        return r.T, r.F, r.depth

    run = run_local(body, seeds=setup, materials=[dealer.view(i) for i in PARTIES],
                    enclave_handler=svc.handler, lane_limit=rc.lane_limit, timeout=rc.timeout)
    depth = run.results[0][2]
    T = open_pair_results(run.results, lambda r: r[0])
    F = open_pair_results(run.results, lambda r: r[1])
    secure = TreeState(depth, T, F)
    secure.validate(n_columns=d)

    identical = bool(np.array_equal(secure.T, oracle.T) and np.array_equal(secure.F, oracle.F))

    def accuracy(state: TreeState) -> float:
        hits = sum(int(tree_mod.plaintext_infer(state, row[:-1])) == int(row[-1]) for row in test_rows)
        return hits / len(test_rows)

    acc_oracle = accuracy(oracle)
    acc_secure = accuracy(secure)
    delta_pp = abs(acc_oracle - acc_secure) * 100.0

    print(f"trees identical: {'true' if identical else 'false'}")
    print(f"oracle accuracy: {acc_oracle:.4f}")
    print(f"secure accuracy: {acc_secure:.4f}")
    print(f"accuracy delta: {delta_pp:.2f} pp (tolerance {tolerance:.2f})")
    if args.out is not None:
        Path(args.out).write_text(json.dumps({
            "identical": identical,
            "oracle_accuracy": acc_oracle,
            "secure_accuracy": acc_secure,
            "delta_pp": delta_pp,
            "heuristic": rc.heuristic,
            "depth": depth,
            "metrics": json.loads(run.metrics.to_json()),
        }, indent=2, sort_keys=True))
    if rc.heuristic == "tee" and not identical:
        raise CompareMismatch("trusted-path tree differs from the plaintext oracle")
    if delta_pp > tolerance:
        raise CompareMismatch(f"accuracy delta {delta_pp:.2f} pp exceeds tolerance {tolerance:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _bench_oaa(args: argparse.Namespace, rc: RunConfig) -> List[Dict[str, object]]:
    width = rc.width
    lookups = args.lookups if args.lookups is not None else 1000
    sizes = [int(s) for s in (args.sizes or "1,8,64").split(",")]
    ring = Ring(width)
    rows: List[Dict[str, object]] = []
    for m in sizes:
        rng = np.random.default_rng(1234 + m)
        table = rng.integers(0, 1 << min(width, 32), m, dtype=np.uint64)
        idx = rng.integers(0, m, lookups, dtype=np.uint64)
        stores = generate_material(needs_oaa(lookups, m, width), derive_seed(rc.seed, f"bench/{m}"))
        t_pairs = share_values(table, ring, derive_seed(rc.seed, "bench/table"))
        i_pairs = share_values(idx, ring, derive_seed(rc.seed, "bench/idx"))

        def body(eng: PartyEngine) -> AVec:
            tl, th = t_pairs[eng.party - 1]
            il, ih = i_pairs[eng.party - 1]
            with eng.phase("oaa"):
                return oaa(eng, AVec(ring, tl.copy(), th.copy()), AVec(ring, il.copy(), ih.copy()))

        t0 = time.perf_counter()
        run = run_local(body, seeds=SeedSetup.from_master(rc.seed), materials=stores,
                        lane_limit=rc.lane_limit)
        secs = time.perf_counter() - t0
        # Cost is accounted per party (the mesh total triples it): the
        # protocol is symmetric, so take the busiest sender.
        party_bits = max(run.metrics.sent_by_party(i) for i in PARTIES) * 8
        per_lookup = party_bits / lookups
        reference = (4 * width - 1) * m
        rows.append({
            "table_size": m,
            "lookups": lookups,
            "party_bits": party_bits,
            "bits_per_lookup": per_lookup,
            "reference_bits": reference,
            "ratio": per_lookup / reference,
            "rounds": run.metrics.rounds,
            "seconds": secs,
        })
    return rows


def _bench_train(args: argparse.Namespace, rc: RunConfig) -> List[Dict[str, object]]:
    rows_list = [int(s) for s in (args.rows or "128,512").split(",")]
    cols_list = [int(s) for s in (args.cols or "8").split(",")]
    depth_list = [int(s) for s in (args.depths or "3,5").split(",")]
    out: List[Dict[str, object]] = []
    for n in rows_list:
        for d in cols_list:
            for h in depth_list:
                for heU in ("tee", "mpc"):
                    rng = np.random.default_rng(n * 31 + d * 7 + h)
                    data = rng.integers(0, 2, (n, d), dtype=np.uint8)
                    cfg = TrainConfig(depth=h, heuristic=heU, tau=rc.tau, score_ring=Ring(rc.width))
                    setup = SeedSetup.from_master(derive_seed(rc.seed, f"bench/{n}/{d}/{h}"))
                    svc = EnclaveService(setup.enclave_seed)
                    dealer = LiveDealer(derive_seed(rc.seed, f"bench-deal/{n}/{d}/{h}"))
                    x_pairs = share_values(data[:, :-1], RING64, derive_seed(rc.seed, "bx"))
                    y_pairs = share_values(data[:, -1], RING64, derive_seed(rc.seed, "by"))

                    def body(eng: PartyEngine):
                        xl, xh = x_pairs[eng.party - 1]
                        yl, yh = y_pairs[eng.party - 1]
                        X = AVec(RING64, xl.copy(), xh.copy()).reshape((n, d - 1))
                        y = AVec(RING64, yl.copy(), yh.copy())
                        r = train_tree(eng, X, y, cfg)
                        return r.T

                    t0 = time.perf_counter()
                    run = run_local(body, seeds=setup, materials=[dealer.view(i) for i in PARTIES],
                                    enclave_handler=svc.handler, lane_limit=rc.lane_limit)
                    secs = time.perf_counter() - t0
                    out.append({
                        "rows": n, "columns": d, "depth": h, "heuristic": heU,
                        "total_bytes": run.metrics.total_bytes(),
                        "rounds": run.metrics.rounds,
                        "seconds": secs,
                    })
    return out


def _bench_infer(args: argparse.Namespace, rc: RunConfig) -> List[Dict[str, object]]:
    q_list = [int(s) for s in (args.rows or "1000").split(",")]
    depth_list = [int(s) for s in (args.depths or "4,8").split(",")]
    d = (args.cols and int(args.cols.split(",")[0])) or 8
    out: List[Dict[str, object]] = []
    for nq in q_list:
        for h in depth_list:
            rng = np.random.default_rng(nq + h)
            state = tree_mod.random_tree(rng, h, d)
            queries = rng.integers(0, 2, (nq, d - 1), dtype=np.uint8)
            stores = generate_material(inference_needs(nq, h, d), derive_seed(rc.seed, f"bi/{nq}/{h}"))
            t_pairs = share_values(state.T, RING64, derive_seed(rc.seed, "bt"))
            q_pairs = share_values(queries, RING64, derive_seed(rc.seed, "bq"))

            def body(eng: PartyEngine) -> AVec:
                tl, th = t_pairs[eng.party - 1]
                ql, qh = q_pairs[eng.party - 1]
                t = AVec(RING64, tl.copy(), th.copy())
                q = AVec(RING64, ql.copy(), qh.copy()).reshape((nq, d - 1))
                return infer_batch(eng, levels_of(t, h), q)

            t0 = time.perf_counter()
            run = run_local(body, seeds=SeedSetup.from_master(rc.seed), materials=stores,
                            lane_limit=rc.lane_limit)
            secs = time.perf_counter() - t0
            out.append({
                "queries": nq, "depth": h, "columns": d,
                "total_bytes": run.metrics.total_bytes(),
                "rounds": run.metrics.rounds,
                "seconds": secs,
            })
    return out


def _print_table(rows: List[Dict[str, object]]) -> None:
    if not rows:
        return
    cols = list(rows[0].keys())
    widths = {c: max(len(c), *(len(_fmt_cell(r[c])) for r in rows)) for c in cols}
    print("  ".join(c.rjust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(_fmt_cell(r[c]).rjust(widths[c]) for c in cols))


def _fmt_cell(v: object) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def cmd_bench(args: argparse.Namespace) -> int:
    rc = build_run_config(args)
    if args.suite == "oaa":
        rows = _bench_oaa(args, rc)
    elif args.suite == "train":
        rows = _bench_train(args, rc)
    elif args.suite == "infer":
        rows = _bench_infer(args, rc)
    else:
        raise UsageError(f"unknown bench suite {args.suite!r}")
    _print_table(rows)
    if args.out is not None:
        clean = [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
        Path(args.out).write_text(json.dumps(clean, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# binarize
# ---------------------------------------------------------------------------


def cmd_binarize(args: argparse.Namespace) -> int:
    src = Path(args.input)
    try:
        lines = src.read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read {src}: {e}") from e
    table: List[List[str]] = []
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        table.append([c.strip() for c in line.split(",")])
    if not table:
        raise DataError(f"{src}: no data rows")
    n_cols = len(table[0])
    for i, row in enumerate(table):
        if len(row) != n_cols:
            raise DataError(f"{src}: row {i + 1} has {len(row)} cells, expected {n_cols}")

    label_col = args.label if args.label is not None else n_cols - 1
    if not 0 <= label_col < n_cols:
        raise UsageError(f"label column {label_col} out of range")
    thresholds: Dict[int, float] = {}
    for spec in args.threshold or []:
        col, sep, val = spec.partition("=")
        if not sep:
            raise UsageError(f"--threshold needs col=value, got {spec!r}")
        thresholds[int(col)] = float(val)

    def numeric(col: List[str]) -> Optional[np.ndarray]:
        try:
            return np.array([float(v) for v in col], dtype=np.float64)
        except ValueError:
            return None

    columns = [[row[c] for row in table] for c in range(n_cols)]
    out_cols: List[np.ndarray] = []
    mapping: List[Dict[str, object]] = []
    for c in range(n_cols):
        if c == label_col:
            continue
        vals = numeric(columns[c])
        if vals is not None and set(np.unique(vals)) <= {0.0, 1.0}:
            out_cols.append(vals.astype(np.uint8))
            mapping.append({"source": c, "kind": "binary"})
        elif vals is not None:
            cut = thresholds.get(c, float(np.median(vals)))
            out_cols.append((vals > cut).astype(np.uint8))
            mapping.append({"source": c, "kind": "threshold", "cut": cut})
        else:
            cats = sorted(set(columns[c]))
            if len(cats) == 2:
                out_cols.append(np.array([cats.index(v) for v in columns[c]], dtype=np.uint8))
                mapping.append({"source": c, "kind": "binary_categorical", "values": cats})
            else:
                for cat in cats:
                    out_cols.append(np.array([1 if v == cat else 0 for v in columns[c]], dtype=np.uint8))
                    mapping.append({"source": c, "kind": "one_hot", "value": cat})

    lab_vals = numeric(columns[label_col])
    if lab_vals is not None:
        if not set(np.unique(lab_vals)) <= {0.0, 1.0}:
            raise DataError("label column must be binary")
        label = lab_vals.astype(np.uint8)
    else:
        cats = sorted(set(columns[label_col]))
        if len(cats) != 2:
            raise DataError(f"label column has {len(cats)} categories, need 2")
        label = np.array([cats.index(v) for v in columns[label_col]], dtype=np.uint8)
        mapping.append({"source": label_col, "kind": "label", "values": cats})
    out_cols.append(label)

    data = np.stack(out_cols, axis=1)
    tree_mod.save_csv(args.output, data)
    if args.mapping is not None:
        Path(args.mapping).write_text(json.dumps(mapping, indent=2, sort_keys=True))
    print(f"binarized {len(table)} rows x {n_cols} columns -> {data.shape[1]} binary columns")
    return EXIT_OK


# ---------------------------------------------------------------------------
# enclave
# ---------------------------------------------------------------------------


def cmd_enclave(args: argparse.Namespace) -> int:
    host, port = parse_endpoint(args.listen)
    doc = json.loads(Path(args.seed_file).read_text())
    seed = bytes.fromhex(doc["seed"])
    keys = {int(k): bytes.fromhex(v) for k, v in doc.get("keys", {}).items()} or None
    sessions = args.sessions if args.sessions is not None else 1
    timeout = args.timeout if args.timeout is not None else 300.0
    for s in range(sessions):
        log.info("enclave session %d/%d on %s:%d", s + 1, sessions, host, port)
        serve_tcp(host, port, seed, keys=keys, timeout=timeout)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser, tcp: bool = False) -> None:
    p.add_argument("--config", help="key = value file supplying flag defaults")
    p.add_argument("--width", type=int, help="score ring bit width (default 32)")
    p.add_argument("--tau", type=int, help="fixed-point fractional bits (default 10)")
    p.add_argument("--depth", type=int, help="tree depth H (default 4)")
    p.add_argument("--policy", choices=("fixed", "grow", "feature_cap"),
                   help="depth policy (default fixed)")
    p.add_argument("--max-depth", type=int, dest="max_depth", help="cap for the grow policy")
    p.add_argument("--heuristic", choices=("mpc", "tee"), help="split scoring path (default mpc)")
    p.add_argument("--seed", help="master seed: integer or hex string (default 0)")
    p.add_argument("--lane-limit", type=int, dest="lane_limit", help="batch ceiling per round")
    p.add_argument("--timeout", type=float, help="transport timeout seconds")
    p.add_argument("--profile", choices=("prod", "test"), help="prod (default) or test")
    p.add_argument("--reveal", action="store_true", default=None,
                   help="write plaintext outputs (test profile only)")
    if tcp:
        p.add_argument("--party", type=int, help="run as one seat (1, 2, or 3) over TCP")
        p.add_argument("--hosts", help="three host:port endpoints, party order, comma separated")
        p.add_argument("--enclave", help="host:port of the trusted heuristic endpoint")


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="obtree",
                                  description="Three-party decision-tree training and inference on secret shares.")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("deal", help="split a dataset into shares and write correlated material")
    _add_run_flags(p)
    p.add_argument("--data", help="binary CSV with the label in the last column")
    p.add_argument("--queries", help="binary CSV of feature rows (inference dealing)")
    p.add_argument("--tree", help="plaintext tree JSON to share alongside queries")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_deal)

    p = sub.add_parser("train", help="train a tree on shared data")
    _add_run_flags(p, tcp=True)
    p.add_argument("--data", help="binary CSV (in-process live dealing)")
    p.add_argument("--deal-dir", dest="deal_dir", help="directory produced by obtree deal")
    p.add_argument("--out", required=True, help="output directory for tree shares")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify shared queries with a shared tree")
    _add_run_flags(p, tcp=True)
    p.add_argument("--queries", help="binary CSV of feature rows (in-process mode)")
    p.add_argument("--tree-dir", dest="tree_dir", help="directory produced by obtree train")
    p.add_argument("--tree", help="plaintext tree JSON (in-process mode)")
    p.add_argument("--deal-dir", dest="deal_dir", help="directory produced by obtree deal --queries")
    p.add_argument("--out", required=True, help="output directory for predictions")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("compare", help="train both oracle and secure paths and compare")
    _add_run_flags(p)
    p.add_argument("--data", required=True, help="binary CSV with the label in the last column")
    p.add_argument("--split", type=float, help="training fraction (default 0.8 mpc, 1.0 tee)")
    p.add_argument("--tolerance", type=float, help="accuracy delta tolerance in pp (default 4)")
    p.add_argument("--out", help="write a JSON report here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", help="measure communication cost over a parameter grid")
    _add_run_flags(p)
    p.add_argument("--suite", choices=("oaa", "train", "infer"), default="oaa")
    p.add_argument("--lookups", type=int, help="lookup count for the oaa suite (default 1000)")
    p.add_argument("--sizes", help="comma list of table sizes for the oaa suite")
    p.add_argument("--rows", help="comma list of dataset/query sizes")
    p.add_argument("--cols", help="comma list of column counts")
    p.add_argument("--depths", help="comma list of tree depths")
    p.add_argument("--out", help="write the table as JSON here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("binarize", help="convert a raw CSV to binary features")
    p.add_argument("input", help="source CSV")
    p.add_argument("output", help="destination binary CSV")
    p.add_argument("--label", type=int, help="label column index (default last)")
    p.add_argument("--threshold", action="append", help="col=value numeric cut, repeatable")
    p.add_argument("--mapping", help="write the column mapping as JSON here")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("enclave", help="serve the trusted heuristic endpoint over TCP")
    p.add_argument("--listen", required=True, help="host:port to listen on")
    p.add_argument("--seed-file", dest="seed_file", required=True,
                   help="enclave.json produced by obtree deal")
    p.add_argument("--sessions", type=int, help="number of sessions to serve (default 1)")
    p.add_argument("--timeout", type=float, help="socket timeout seconds")
    p.set_defaults(func=cmd_enclave)

    return top


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("OBTREE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        if getattr(args, "config", None):
            apply_config(args, load_config_file(args.config))
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TreeError, RingError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TransportError, MaterialError, ShareError, EnclaveError) as e:
        print(f"protocol failure: {e}", file=sys.stderr)
        return EXIT_PROTOCOL
    except CompareMismatch as e:
        print(f"verification mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
