import threading

import numpy as np
import pytest

from obtree.enclave import (
    EnclaveError,
    EnclaveService,
    OP_SPLIT,
    pack_labels_request,
    pack_split_request,
    parse_labels_response,
    parse_split_response,
    serve_tcp,
)
from obtree.ring import RING64
from obtree.rss import make_arith_shares, make_bit_shares
from obtree.transport import AesCtrPrg, TcpChannel, derive_seed
from obtree import tree as tree_mod


def _word_pairs(values, label):
    prg = AesCtrPrg(derive_seed(b"\x51" * 16, label))
    return make_arith_shares(np.asarray(values, dtype=np.uint64).ravel(), RING64,
                             lambda n: prg.next_words(n, 64))


def _bit_pairs(bits, label):
    prg = AesCtrPrg(derive_seed(b"\x52" * 16, label))
    return make_bit_shares(np.asarray(bits, dtype=np.uint8).ravel(), lambda n: prg.next_bits(n))


def _open_words(answers):
    los = [a[0].astype(object) for a in answers]
    return np.array((los[0] + los[1] + los[2]) % (1 << 64), dtype=np.uint64)


def _open_bits(answers):
    return answers[0][0] ^ answers[1][0] ^ answers[2][0]


def _split_payloads(counters, gammas, types, d):
    n = len(counters)
    flat = np.stack(counters).astype(np.uint64).ravel()
    c_pairs = _word_pairs(flat, "c")
    g_pairs = _bit_pairs(gammas, "g")
    f_pairs = _word_pairs(types, "f")
    return [
        pack_split_request(i, 1, c_pairs[i - 1], g_pairs[i - 1], f_pairs[i - 1], d)
        for i in (1, 2, 3)
    ]


def test_split_request_roundtrip_matches_plaintext():
    feats = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.uint8)
    labs = np.array([0, 0, 1, 1], dtype=np.uint8)
    counters = [tree_mod.node_counters(feats, labs, np.arange(4)),
                np.zeros((3, 4), dtype=np.int64)]
    gammas = np.ones((2, 2), dtype=bool)
    types = np.array([1, 2], dtype=np.uint64)

    svc = EnclaveService(b"\x53" * 16)
    replies = svc.handler(_split_payloads(counters, gammas, types, 3))
    parsed = [parse_split_response(r, 2, 3) for r in replies]
    sd = _open_words([p[0] for p in parsed])
    new_f = _open_words([p[1] for p in parsed])
    is_int = _open_bits([p[2] for p in parsed])
    new_g = _open_bits([p[3] for p in parsed])

    want_sd, want_f, want_int, want_g = tree_mod.split_decisions(counters, gammas, types)
    assert np.array_equal(sd, want_sd)
    assert np.array_equal(new_f, want_f)
    assert np.array_equal(is_int, want_int.astype(np.uint8))
    assert np.array_equal(new_g, want_g.astype(np.uint8))
    assert svc.calls == 1


def test_labels_request_roundtrip():
    counters = [np.array([[3, 1], [1, 0], [2, 1]], dtype=np.int64),
                np.array([[2, 2], [2, 1], [0, 1]], dtype=np.int64)]
    c_pairs = _word_pairs(np.stack(counters).ravel(), "lc")
    payloads = [pack_labels_request(i, 2, c_pairs[i - 1], 2, 2) for i in (1, 2, 3)]
    svc = EnclaveService(b"\x54" * 16)
    replies = svc.handler(payloads)
    got = _open_words([parse_labels_response(r, 2) for r in replies])
    assert np.array_equal(got, tree_mod.majority_labels(counters))


def test_inconsistent_shares_rejected():
    counters = [np.zeros((3, 4), dtype=np.int64)]
    payloads = _split_payloads(counters, np.ones((1, 2), dtype=bool),
                               np.array([1], dtype=np.uint64), 3)
    tampered = bytearray(payloads[0])
    tampered[16] ^= 1  # flip a counter-share byte behind the header
    svc = EnclaveService(b"\x55" * 16)
    with pytest.raises(EnclaveError, match="inconsistent"):
        svc.handler([bytes(tampered), payloads[1], payloads[2]])


def test_party_order_and_parameter_agreement_enforced():
    counters = [np.zeros((3, 4), dtype=np.int64)]
    payloads = _split_payloads(counters, np.ones((1, 2), dtype=bool),
                               np.array([1], dtype=np.uint64), 3)
    svc = EnclaveService(b"\x56" * 16)
    with pytest.raises(EnclaveError, match="order"):
        svc.handler([payloads[1], payloads[0], payloads[2]])


def test_resharing_is_seeded():
    counters = [np.zeros((3, 4), dtype=np.int64)]
    payloads = _split_payloads(counters, np.ones((1, 2), dtype=bool),
                               np.array([1], dtype=np.uint64), 3)
    a = EnclaveService(b"\x57" * 16).handler(payloads)
    b = EnclaveService(b"\x57" * 16).handler(payloads)
    assert a == b
    c = EnclaveService(b"\x58" * 16).handler(payloads)
    assert a != c


def test_tcp_service_with_sealed_links():
    host = "127.0.0.1"
    base = 9470
    seed = b"\x59" * 16
    keys = {i: derive_seed(seed, f"chan/{i}") for i in (1, 2, 3)}
    ready = threading.Event()
    server = threading.Thread(
        target=serve_tcp, args=(host, base + 9, seed),
        kwargs={"keys": keys, "ready": ready, "timeout": 30}, daemon=True)
    server.start()
    assert ready.wait(10)

    counters = [np.array([[2, 2], [2, 0], [0, 2]], dtype=np.int64)]
    payloads = _split_payloads(counters, np.ones((1, 1), dtype=bool),
                               np.array([1], dtype=np.uint64), 2)
    hosts = {i: (host, base + i) for i in (1, 2, 3)}
    replies = [None, None, None]

    def seat(party):
        chan = TcpChannel(party, hosts, enclave_addr=(host, base + 9),
                          timeout=30, enclave_key=keys[party])
        replies[party - 1] = chan.enclave_call(payloads[party - 1], tag="hc_tee:0")
        chan.close()

    threads = [threading.Thread(target=seat, args=(i,)) for i in (1, 2, 3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    server.join(timeout=30)
    assert all(r is not None for r in replies)
    parsed = [parse_split_response(r, 1, 2) for r in replies]
    sd = _open_words([p[0] for p in parsed])
    want_sd, _, _, _ = tree_mod.split_decisions(counters, np.ones((1, 1), dtype=bool),
                                                np.array([1], dtype=np.uint64))
    assert np.array_equal(sd, want_sd)
