"""Shared test plumbing: deterministic sharing and three-engine runs."""

from fractions import Fraction

import numpy as np

from obtree.dealer import LiveDealer
from obtree.enclave import EnclaveService
from obtree.ring import RING64
from obtree.rss import AVec, BitVec, make_arith_shares, make_bit_shares, run_local
from obtree.train import train_tree
from obtree.transport import AesCtrPrg, SeedSetup, derive_seed
from obtree import tree as tree_mod

_SHARE_SEED = b"\x42" * 16
_BIT_SEED = b"\x43" * 16

GAP_TOLERANCE = Fraction(1, 1 << 7)


def share_in(eng, values, ring, label="fix"):
    """Consistent shares of a public test vector, same stream on every engine."""
    prg = AesCtrPrg(derive_seed(_SHARE_SEED, label))
    arr = np.asarray(values, dtype=np.uint64)
    pairs = make_arith_shares(arr.ravel(), ring, lambda n: prg.next_words(n, ring.width))
    lo, hi = pairs[eng.party - 1]
    return AVec(ring, lo.copy(), hi.copy()).reshape(arr.shape)


def share_bits_in(eng, bits, label="fixb"):
    prg = AesCtrPrg(derive_seed(_BIT_SEED, label))
    arr = np.asarray(bits, dtype=np.uint8)
    pairs = make_bit_shares(arr.ravel(), lambda n: prg.next_bits(n))
    lo, hi = pairs[eng.party - 1]
    return BitVec(lo.copy(), hi.copy()).reshape(arr.shape)


def open_u64(results, ring, pick=lambda r: r):
    """Add the three lo shares of an AVec result (exact in python ints)."""
    los = [np.asarray(pick(r).lo, dtype=np.uint64) for r in results]
    total = (los[0].astype(object) + los[1] + los[2]) % (1 << ring.width)
    return np.array(total, dtype=np.uint64).reshape(pick(results[0]).shape)


def open_bits3(results, pick=lambda r: r):
    los = [np.asarray(pick(r).lo, dtype=np.uint8) for r in results]
    return (los[0] ^ los[1] ^ los[2]).reshape(pick(results[0]).shape)


def run_dealer(fn, *, seed=7, enclave_handler=None, lane_limit=1 << 22, dealer_seed=b"\x31" * 16):
    """run_local wired to a live dealer; returns the LocalRun."""
    dealer = LiveDealer(dealer_seed)
    return run_local(
        fn,
        seeds=seed if isinstance(seed, SeedSetup) else SeedSetup.from_int(seed),
        materials=[dealer.view(i) for i in (1, 2, 3)],
        enclave_handler=enclave_handler,
        lane_limit=lane_limit,
    )


def direct_gini(counters, feature):
    """Weighted impurity straight from the definition, exact rationals."""
    a = [int(counters[0][2 * feature + v]) for v in (0, 1)]
    n = a[0] + a[1]
    if n == 0:
        return tree_mod.WORST_SCORE
    total = Fraction(0)
    for v in (0, 1):
        if a[v] == 0:
            continue
        m0 = int(counters[1][2 * feature + v])
        m1 = int(counters[2][2 * feature + v])
        branch = 1 - Fraction(m0, a[v]) ** 2 - Fraction(m1, a[v]) ** 2
        total += Fraction(a[v], n) * branch
    return total


def secure_train(data, cfg, seed, materials=None):
    """Train on shares and open (T, F, depth); tuple of uint64 arrays."""
    setup = SeedSetup.from_master(derive_seed(seed, "run"))
    svc = EnclaveService(setup.enclave_seed)
    if materials is None:
        dealer = LiveDealer(derive_seed(seed, "deal"))
        materials = [dealer.view(i) for i in (1, 2, 3)]
    n, d = data.shape

    def body(eng):
        X = share_in(eng, data[:, :-1], RING64, "X")
        y = share_in(eng, data[:, -1], RING64, "y")
        r = train_tree(eng, X, y, cfg)
        return r.T, r.F, r.depth

    run = run_local(body, seeds=setup, materials=materials, enclave_handler=svc.handler)
    depths = {r[2] for r in run.results}
    assert len(depths) == 1
    T = open_u64(run.results, RING64, pick=lambda r: r[0])
    F = open_u64(run.results, RING64, pick=lambda r: r[1])
    return T, F, depths.pop(), run


def oracle_for(data, depth, seed):
    return tree_mod.plaintext_train(data, depth, derive_seed(seed, "run"))


def first_divergence_gap(data, depth, ref, T, F):
    """At the first breadth-first slot where two trees differ they still share
    membership and feature budget, so the rational scores there decide whether
    the divergence was a legitimate near-tie."""
    feats, labs = data[:, :-1], data[:, -1]
    members = {0: np.arange(data.shape[0])}
    for i in range((1 << depth) - 1):
        if F[i] != ref.F[i]:
            return ("type", i, None)
        if T[i] == ref.T[i]:
            if i < (1 << (depth - 1)) - 1 and ref.F[i] == tree_mod.F_INTERNAL:
                m = members[i]
                f = int(ref.T[i])
                go = feats[m, f].astype(bool)
                members[2 * i + 1] = m[~go]
                members[2 * i + 2] = m[go]
            continue
        if ref.F[i] != tree_mod.F_INTERNAL:
            return ("placeholder", i, None)
        c = tree_mod.node_counters(feats, labs, members[i])
        gap = abs(tree_mod.plaintext_gini(c, int(ref.T[i])) - tree_mod.plaintext_gini(c, int(T[i])))
        return ("score", i, gap)
    return ("none", -1, None)


def assert_tree_acceptable(data, depth, ref, T, F, heuristic):
    tree_mod.TreeState(depth, T, F).validate(n_columns=data.shape[1])
    if np.array_equal(T, ref.T) and np.array_equal(F, ref.F):
        return
    assert heuristic == "mpc", "trusted path must be bit exact"
    kind, slot, gap = first_divergence_gap(data, depth, ref, T, F)
    assert kind == "score", f"structural divergence at slot {slot}"
    assert gap is not None and gap <= GAP_TOLERANCE, f"slot {slot}: gap {gap}"
