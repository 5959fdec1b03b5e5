"""Attested helper endpoint for the heuristic phase.

Each party uploads its replicated share pair of the per-level node state;
the helper checks pair consistency, reconstructs, runs the same exact
split/label code as the plaintext reference (register-style masked scans,
no data-dependent work pattern), and hands back freshly resharded pairs
drawn from its own deterministic stream.

Two deployments share the handler: the in-process rendezvous used by tests
and the local CLI backend (no encryption), and a TCP server where each
party's link is sealed with AES-GCM under a per-party key (parties use even
nonces, the helper answers with odd ones).
"""

from __future__ import annotations

import socket
import struct
import threading
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tree as tree_mod
from .ring import RING64
from .transport import (
    PARTIES,
    AesCtrPrg,
    TransportError,
    open_sealed,
    recv_frame,
    seal,
    send_frame,
)

OP_SPLIT = 1
OP_LABELS = 2

_HEADER = struct.Struct("<BBHIH6x")  # op, party, level, n_nodes, n_columns, pad


class EnclaveError(RuntimeError):
    pass


def _take_words(raw: bytes, at: int, n: int) -> Tuple[np.ndarray, int]:
    arr = np.frombuffer(raw, dtype="<u8", count=n, offset=at).astype(np.uint64)
    return arr, at + 8 * n


def _take_bytes(raw: bytes, at: int, n: int) -> Tuple[np.ndarray, int]:
    arr = np.frombuffer(raw, dtype=np.uint8, count=n, offset=at).copy()
    return arr, at + n


def _words(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr.ravel(), dtype=np.uint64).astype("<u8").tobytes()


def pack_split_request(party: int, level: int, counters_pair, gamma_pair, types_pair, n_columns: int) -> bytes:
    n = types_pair[0].size
    head = _HEADER.pack(OP_SPLIT, party, level, n, n_columns)
    return (head + _words(counters_pair[0]) + _words(counters_pair[1])
            + gamma_pair[0].astype(np.uint8).tobytes() + gamma_pair[1].astype(np.uint8).tobytes()
            + _words(types_pair[0]) + _words(types_pair[1]))


def pack_labels_request(party: int, level: int, counters_pair, n_nodes: int, n_columns: int) -> bytes:
    head = _HEADER.pack(OP_LABELS, party, level, n_nodes, n_columns)
    return head + _words(counters_pair[0]) + _words(counters_pair[1])


def parse_split_response(raw: bytes, n: int, n_columns: int):
    nf = n_columns - 1
    at = 0
    sd_lo, at = _take_words(raw, at, n)
    sd_hi, at = _take_words(raw, at, n)
    f_lo, at = _take_words(raw, at, n)
    f_hi, at = _take_words(raw, at, n)
    int_lo, at = _take_bytes(raw, at, n)
    int_hi, at = _take_bytes(raw, at, n)
    g_lo, at = _take_bytes(raw, at, n * nf)
    g_hi, at = _take_bytes(raw, at, n * nf)
    return (sd_lo, sd_hi), (f_lo, f_hi), (int_lo, int_hi), (g_lo.reshape(n, nf), g_hi.reshape(n, nf))


def parse_labels_response(raw: bytes, n: int):
    at = 0
    lo, at = _take_words(raw, at, n)
    hi, at = _take_words(raw, at, n)
    return lo, hi


class EnclaveService:
    """Stateless per-call helper; resharing randomness is seeded so repeated
    runs are reproducible end to end."""

    def __init__(self, seed: bytes):
        self._prg = AesCtrPrg(seed)
        self.calls = 0

    # -- share plumbing ------------------------------------------------------

    def _reconstruct_words(self, pairs: List[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        (a_lo, a_hi), (b_lo, b_hi), (c_lo, c_hi) = pairs
        if not (np.array_equal(a_hi, b_lo) and np.array_equal(b_hi, c_lo) and np.array_equal(c_hi, a_lo)):
            raise EnclaveError("uploaded share pairs are inconsistent")
        return RING64.reduce(a_lo + b_lo + c_lo)

    def _reconstruct_bits(self, pairs: List[Tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
        (a_lo, a_hi), (b_lo, b_hi), (c_lo, c_hi) = pairs
        if not (np.array_equal(a_hi, b_lo) and np.array_equal(b_hi, c_lo) and np.array_equal(c_hi, a_lo)):
            raise EnclaveError("uploaded bit shares are inconsistent")
        return a_lo ^ b_lo ^ c_lo

    def _share_words(self, values: np.ndarray) -> List[bytes]:
        s1 = self._prg.next_words(values.size, 64)
        s2 = self._prg.next_words(values.size, 64)
        s3 = RING64.sub(RING64.sub(RING64.reduce(values.ravel()), s1), s2)
        pairs = [(s1, s2), (s2, s3), (s3, s1)]
        return [_words(lo) + _words(hi) for lo, hi in pairs]

    def _share_bits(self, bits: np.ndarray) -> List[bytes]:
        flat = bits.ravel().astype(np.uint8) & 1
        s1 = self._prg.next_bits(flat.size)
        s2 = self._prg.next_bits(flat.size)
        s3 = flat ^ s1 ^ s2
        pairs = [(s1, s2), (s2, s3), (s3, s1)]
        return [lo.tobytes() + hi.tobytes() for lo, hi in pairs]

    # -- request handling ----------------------------------------------------

    def handler(self, payloads: List[bytes]) -> List[bytes]:
        self.calls += 1
        heads = [_HEADER.unpack_from(p, 0) for p in payloads]
        op, _, level, n, d = heads[0]
        for h, expect_party in zip(heads, PARTIES):
            if h[1] != expect_party:
                raise EnclaveError(f"request order mismatch: got party {h[1]}")
            if (h[0], h[2], h[3], h[4]) != (op, level, n, d):
                raise EnclaveError("parties disagree on request parameters")
        if op == OP_SPLIT:
            return self._handle_split(payloads, n, d)
        if op == OP_LABELS:
            return self._handle_labels(payloads, n, d)
        raise EnclaveError(f"unknown enclave op {op}")

    def _parse_counters(self, payloads: List[bytes], n: int, d: int) -> Tuple[np.ndarray, List[int]]:
        cells = n * 3 * 2 * (d - 1)
        pairs = []
        offsets = []
        for p in payloads:
            at = _HEADER.size
            lo, at = _take_words(p, at, cells)
            hi, at = _take_words(p, at, cells)
            pairs.append((lo, hi))
            offsets.append(at)
        counters = self._reconstruct_words(pairs).reshape(n, 3, 2 * (d - 1))
        return counters, offsets

    def _handle_split(self, payloads: List[bytes], n: int, d: int) -> List[bytes]:
        nf = d - 1
        counters, offsets = self._parse_counters(payloads, n, d)
        gam_pairs, f_pairs = [], []
        for p, at in zip(payloads, offsets):
            g_lo, at = _take_bytes(p, at, n * nf)
            g_hi, at = _take_bytes(p, at, n * nf)
            f_lo, at = _take_words(p, at, n)
            f_hi, at = _take_words(p, at, n)
            gam_pairs.append((g_lo, g_hi))
            f_pairs.append((f_lo, f_hi))
        gammas = self._reconstruct_bits(gam_pairs).reshape(n, nf).astype(bool)
        types = self._reconstruct_words(f_pairs)
        sd, new_f, is_int, new_g = tree_mod.split_decisions(
            [counters[k].astype(np.int64) for k in range(n)], gammas, types)
        sd_shares = self._share_words(sd)
        f_shares = self._share_words(new_f)
        int_shares = self._share_bits(is_int.astype(np.uint8))
        g_shares = self._share_bits(new_g.astype(np.uint8))
        return [sd_shares[i] + f_shares[i] + int_shares[i] + g_shares[i] for i in range(3)]

    def _handle_labels(self, payloads: List[bytes], n: int, d: int) -> List[bytes]:
        counters, _ = self._parse_counters(payloads, n, d)
        labels = tree_mod.majority_labels([counters[k].astype(np.int64) for k in range(n)])
        return self._share_words(labels)


def serve_tcp(host: str, port: int, seed: bytes, keys: Optional[Dict[int, bytes]] = None,
              ready: Optional[threading.Event] = None, timeout: float = 300.0) -> None:
    """Serve one three-party session: accept the parties, answer request
    batches until they disconnect.  `keys` maps party id to its AES-GCM link
    key; omit for plaintext links."""
    service = EnclaveService(seed)
    listener = socket.create_server((host, port))
    listener.settimeout(timeout)
    if ready is not None:
        ready.set()
    conns: Dict[int, socket.socket] = {}
    try:
        while len(conns) < 3:
            sock, _ = listener.accept()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(timeout)
            party = recv_frame(sock)[0]
            if party not in PARTIES or party in conns:
                sock.close()
                raise EnclaveError(f"unexpected hello from party {party}")
            conns[party] = sock
        nonces = {i: 1 for i in PARTIES}  # helper side uses odd nonces
        while True:
            requests = []
            try:
                for i in PARTIES:
                    wire = recv_frame(conns[i])
                    if keys is not None:
                        wire = open_sealed(keys[i], wire)
                    requests.append(wire)
            except TransportError:
                return  # parties hung up; session over
            responses = service.handler(requests)
            for i in PARTIES:
                wire = responses[i - 1]
                if keys is not None:
                    wire = seal(keys[i], nonces[i], wire)
                    nonces[i] += 2
                send_frame(conns[i], wire)
    finally:
        for s in conns.values():
            s.close()
        listener.close()
