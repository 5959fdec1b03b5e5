"""Party identities, pairwise PRG seeds, transports, and cost accounting.

Three parties are numbered 1, 2, 3 around a ring; party i's successor is
``next_party(i)``.  An optional trusted-enclave endpoint is addressed as
party 0 in transcripts.

A protocol advances in rounds.  In one round every participating party calls
``Channel.exchange`` exactly once with its outgoing messages and the set of
peers it expects to hear from; the transport delivers everything and records
(round, sender, receiver, nbytes, tag) per message.  Transcripts never hold
payloads, only sizes, so diffing two transcripts compares communication
*shape* and nothing else.

Two interchangeable backends are provided: an in-process router (threads,
deterministic transcripts regardless of scheduling) and a TCP mesh with
4-byte big-endian length-prefixed frames.
"""

from __future__ import annotations

import hashlib
import json
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

PARTIES = (1, 2, 3)
ENCLAVE_ID = 0

SEED_BYTES = 16
FRAME_HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 31


class TransportError(RuntimeError):
    pass


def next_party(i: int) -> int:
    return i % 3 + 1


def prev_party(i: int) -> int:
    return (i - 2) % 3 + 1


# ---------------------------------------------------------------------------
# Seeded PRG
# ---------------------------------------------------------------------------


def derive_seed(master: bytes, label: str) -> bytes:
    """Deterministic 128-bit subseed derivation."""
    return hashlib.sha256(master + b"/" + label.encode()).digest()[:SEED_BYTES]


class AesCtrPrg:
    """Deterministic keystream generator over AES-128-CTR.

    Both holders of a pairwise seed draw the same values as long as they
    request the same amounts in the same order, which SPMD protocol code
    guarantees by construction.
    """

    def __init__(self, seed: bytes):
        if len(seed) != SEED_BYTES:
            raise ValueError("PRG seed must be 16 bytes")
        self.seed = seed
        self._enc = Cipher(algorithms.AES(seed), modes.CTR(b"\x00" * 16)).encryptor()
        self.drawn = 0

    def next_bytes(self, n: int) -> bytes:
        self.drawn += n
        return self._enc.update(b"\x00" * n)

    def next_words(self, count: int, width: int) -> np.ndarray:
        """Uniform uint64 array with the low ``width`` bits random."""
        nbytes = width // 8
        raw = self.next_bytes(count * nbytes)
        if width == 64:
            return np.frombuffer(raw, dtype="<u8").copy()
        if width == 32:
            return np.frombuffer(raw, dtype="<u4").astype(np.uint64)
        return np.frombuffer(raw, dtype=np.uint8).astype(np.uint64)

    def next_bits(self, count: int) -> np.ndarray:
        raw = np.frombuffer(self.next_bytes((count + 7) // 8), dtype=np.uint8)
        return np.unpackbits(raw)[:count]


@dataclass
class SeedSetup:
    """All symmetric key material for one run, derived from a master seed.

    pair_seeds[i] is shared by party i and next_party(i); local_seeds are
    private per party; the enclave and filler seeds serve the trusted
    heuristic endpoint and the public leaf-filler stream.
    """

    master: bytes
    pair_seeds: Dict[int, bytes]
    local_seeds: Dict[int, bytes]
    enclave_seed: bytes
    filler_seed: bytes
    enclave_channel_keys: Dict[int, bytes]

    @classmethod
    def from_master(cls, master: bytes) -> "SeedSetup":
        if len(master) == 0:
            raise ValueError("empty master seed")
        return cls(
            master=master,
            pair_seeds={i: derive_seed(master, f"pair/{i}") for i in PARTIES},
            local_seeds={i: derive_seed(master, f"local/{i}") for i in PARTIES},
            enclave_seed=derive_seed(master, "enclave"),
            filler_seed=derive_seed(master, "filler"),
            enclave_channel_keys={i: derive_seed(master, f"enclave-chan/{i}") for i in PARTIES},
        )

    @classmethod
    def from_int(cls, seed: int) -> "SeedSetup":
        return cls.from_master(int(seed).to_bytes(16, "little", signed=False))


# ---------------------------------------------------------------------------
# Transcript and metrics
# ---------------------------------------------------------------------------

Record = Tuple[int, int, int, int, str]  # (round, sender, receiver, nbytes, tag)


class Transcript:
    """Append-only log of message sizes; payload-free by construction."""

    def __init__(self) -> None:
        self.records: List[Record] = []

    def append(self, round_no: int, sender: int, receiver: int, nbytes: int, tag: str) -> None:
        self.records.append((round_no, sender, receiver, nbytes, tag))

    def extend(self, records: Iterable[Record]) -> None:
        self.records.extend(records)

    def shape(self) -> Tuple[Record, ...]:
        return tuple(self.records)

    def total_bytes(self, sender: Optional[int] = None) -> int:
        return sum(r[3] for r in self.records if sender is None or r[1] == sender)

    def rounds(self) -> int:
        return max((r[0] for r in self.records), default=0)


class Metrics:
    """Aggregated view of a transcript: rounds plus bytes per pair and phase."""

    def __init__(self, rounds: int, bytes_by_pair: Dict[str, int], bytes_by_tag: Dict[str, int], rounds_by_tag: Dict[str, int]):
        self.rounds = rounds
        self.bytes_by_pair = bytes_by_pair
        self.bytes_by_tag = bytes_by_tag
        self.rounds_by_tag = rounds_by_tag

    @classmethod
    def from_transcript(cls, transcript: Transcript) -> "Metrics":
        pair: Dict[str, int] = {}
        tagb: Dict[str, int] = {}
        tag_rounds: Dict[str, set] = {}
        for rnd, s, r, n, tag in transcript.records:
            key = f"{s}->{r}"
            pair[key] = pair.get(key, 0) + n
            tagb[tag] = tagb.get(tag, 0) + n
            tag_rounds.setdefault(tag, set()).add(rnd)
        return cls(
            rounds=transcript.rounds(),
            bytes_by_pair=dict(sorted(pair.items())),
            bytes_by_tag=dict(sorted(tagb.items())),
            rounds_by_tag={k: len(v) for k, v in sorted(tag_rounds.items())},
        )

    def total_bytes(self) -> int:
        return sum(self.bytes_by_pair.values())

    def sent_by_party(self, party: int) -> int:
        return sum(v for k, v in self.bytes_by_pair.items() if k.startswith(f"{party}->"))

    def to_json(self) -> str:
        return json.dumps(
            {
                "rounds": self.rounds,
                "total_bytes": self.total_bytes(),
                "bytes_by_pair": self.bytes_by_pair,
                "bytes_by_phase": self.bytes_by_tag,
                "rounds_by_phase": self.rounds_by_tag,
            },
            indent=2,
        )


# ---------------------------------------------------------------------------
# Channel interface
# ---------------------------------------------------------------------------


class Channel:
    """Per-party handle used by protocol code; one of the backends below."""

    party: int

    def exchange(self, outgoing: Dict[int, bytes], expect: Sequence[int], tag: str) -> Dict[int, bytes]:
        raise NotImplementedError

    def enclave_call(self, payload: bytes, tag: str) -> bytes:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# In-process backend
# ---------------------------------------------------------------------------


class InprocRouter:
    """Shared rendezvous for three party threads (plus optional enclave).

    All parties must call exchange once per round.  The barrier action commits
    the round: it bumps the round counter (only if any bytes moved), appends
    transcript records in canonical (sender, receiver) order so transcripts do
    not depend on thread scheduling, and sanity-checks that every party is in
    the same protocol phase.
    """

    def __init__(self, timeout: float = 300.0):
        self.timeout = timeout
        self.round_no = 0
        self.transcript = Transcript()
        self._slots: Dict[int, Dict[int, bytes]] = {i: {} for i in PARTIES}
        self._pending: Dict[int, Tuple[Dict[int, bytes], Tuple[int, ...], str]] = {}
        self._barrier = threading.Barrier(3, action=self._commit)
        self._failed: List[BaseException] = []
        self._enclave: Optional["EnclaveBridge"] = None

    def channel(self, party: int) -> "InprocChannel":
        return InprocChannel(self, party)

    def attach_enclave(self, handler: Callable[[List[bytes]], List[bytes]]) -> None:
        self._enclave = EnclaveBridge(self, handler)

    def _commit(self) -> None:
        tags = {t for (_, _, t) in self._pending.values()}
        if len(tags) != 1:
            raise TransportError(f"parties diverged: round tags {sorted(tags)}")
        tag = tags.pop()
        records = []
        for sender in PARTIES:
            outgoing, _, _ = self._pending[sender]
            for receiver, payload in sorted(outgoing.items()):
                if receiver not in PARTIES or receiver == sender:
                    raise TransportError(f"party {sender} addressed invalid receiver {receiver}")
                records.append((sender, receiver, len(payload), payload))
        if records:
            self.round_no += 1
            for sender, receiver, n, payload in records:
                self.transcript.append(self.round_no, sender, receiver, n, tag)
                self._slots[receiver][sender] = payload
        self._pending.clear()

    def _exchange(self, party: int, outgoing: Dict[int, bytes], expect: Tuple[int, ...], tag: str) -> Dict[int, bytes]:
        self._pending[party] = (outgoing, expect, tag)
        try:
            self._barrier.wait(timeout=self.timeout)
        except threading.BrokenBarrierError as e:
            raise TransportError("round barrier broken (peer died or deadlock timeout)") from e
        inbox = self._slots[party]
        got = {}
        for peer in expect:
            if peer not in inbox:
                raise TransportError(f"party {party} expected a message from {peer} this round")
            got[peer] = inbox.pop(peer)
        if inbox:
            raise TransportError(f"party {party} received unexpected messages from {sorted(inbox)}")
        return got


class InprocChannel(Channel):
    def __init__(self, router: InprocRouter, party: int):
        self.router = router
        self.party = party

    def exchange(self, outgoing: Dict[int, bytes], expect: Sequence[int], tag: str) -> Dict[int, bytes]:
        return self.router._exchange(self.party, dict(outgoing), tuple(expect), tag)

    def enclave_call(self, payload: bytes, tag: str) -> bytes:
        bridge = self.router._enclave
        if bridge is None:
            raise TransportError("no enclave attached to this run")
        return bridge.call(self.party, payload, tag)


class EnclaveBridge:
    """Gathers one request from each party, runs the enclave handler once,
    scatters the responses.  Counts as two rounds (up and down)."""

    def __init__(self, router: InprocRouter, handler: Callable[[List[bytes]], List[bytes]]):
        self.router = router
        self.handler = handler
        self._lock = threading.Condition()
        self._requests: Dict[int, bytes] = {}
        self._responses: Dict[int, bytes] = {}
        self._generation = 0

    def call(self, party: int, payload: bytes, tag: str) -> bytes:
        with self._lock:
            gen = self._generation
            self._requests[party] = payload
            if len(self._requests) == 3:
                ups = [self._requests[i] for i in PARTIES]
                downs = self.handler(ups)
                if len(downs) != 3:
                    raise TransportError("enclave handler must return one response per party")
                rnd_up = self.router.round_no + 1
                rnd_down = self.router.round_no + 2
                self.router.round_no = rnd_down
                for i in PARTIES:
                    self.router.transcript.append(rnd_up, i, ENCLAVE_ID, len(self._requests[i]), tag)
                    self.router.transcript.append(rnd_down, ENCLAVE_ID, i, len(downs[i - 1]), tag)
                self._responses = {i: downs[i - 1] for i in PARTIES}
                self._requests = {}
                self._generation += 1
                self._lock.notify_all()
            else:
                deadline = time.monotonic() + self.router.timeout
                while self._generation == gen:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise TransportError("enclave rendezvous timed out")
                    self._lock.wait(timeout=remaining)
            return self._responses[party]


# ---------------------------------------------------------------------------
# TCP backend
# ---------------------------------------------------------------------------


def send_frame(sock: socket.socket, payload: bytes) -> None:
    if len(payload) >= MAX_FRAME:
        raise TransportError("frame too large")
    sock.sendall(FRAME_HEADER.pack(len(payload)) + payload)


def recv_frame(sock: socket.socket) -> bytes:
    header = _recv_exact(sock, FRAME_HEADER.size)
    (n,) = FRAME_HEADER.unpack(header)
    if n >= MAX_FRAME:
        raise TransportError("oversized frame announced")
    return _recv_exact(sock, n)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("peer closed connection mid-frame")
        buf.extend(chunk)
    return bytes(buf)


class TcpChannel(Channel):
    """Full mesh over sockets: party i listens for peers j > i and dials
    peers j < i.  Frames are length-prefixed; rounds are tracked locally,
    which stays globally consistent because exchanges are symmetric."""

    def __init__(self, party: int, hosts: Dict[int, Tuple[str, int]], enclave_addr: Optional[Tuple[str, int]] = None,
                 timeout: float = 300.0, enclave_key: Optional[bytes] = None):
        self.party = party
        self.timeout = timeout
        self.round_no = 0
        self.transcript = Transcript()
        self.socks: Dict[int, socket.socket] = {}
        self.enclave_addr = enclave_addr
        self.enclave_key = enclave_key
        self._enclave_sock: Optional[socket.socket] = None
        self._enclave_nonce = 0
        self._connect(hosts)

    def _connect(self, hosts: Dict[int, Tuple[str, int]]) -> None:
        higher = [j for j in PARTIES if j > self.party]
        lower = [j for j in PARTIES if j < self.party]
        listener = None
        if higher:
            host, port = hosts[self.party]
            listener = socket.create_server((host, port), reuse_port=False)
            listener.settimeout(self.timeout)
        for j in lower:
            deadline = time.monotonic() + self.timeout
            while True:
                try:
                    s = socket.create_connection(hosts[j], timeout=self.timeout)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(f"party {self.party} could not reach party {j}")
                    time.sleep(0.05)
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            send_frame(s, bytes([self.party]))
            self.socks[j] = s
        for _ in higher:
            assert listener is not None
            try:
                s, _ = listener.accept()
            except socket.timeout as e:
                raise TransportError("timed out waiting for higher-numbered peers") from e
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            s.settimeout(self.timeout)
            who = recv_frame(s)[0]
            if who not in PARTIES:
                raise TransportError(f"unexpected hello from peer id {who}")
            self.socks[who] = s
        if listener is not None:
            listener.close()
        for s in self.socks.values():
            s.settimeout(self.timeout)

    def exchange(self, outgoing: Dict[int, bytes], expect: Sequence[int], tag: str) -> Dict[int, bytes]:
        if outgoing or expect:
            self.round_no += 1
        for peer, payload in sorted(outgoing.items()):
            send_frame(self.socks[peer], payload)
            self.transcript.append(self.round_no, self.party, peer, len(payload), tag)
        got = {}
        try:
            for peer in expect:
                got[peer] = recv_frame(self.socks[peer])
                self.transcript.append(self.round_no, peer, self.party, len(got[peer]), tag)
        except socket.timeout as e:
            raise TransportError("timed out waiting for a peer message") from e
        return got

    def enclave_call(self, payload: bytes, tag: str) -> bytes:
        if self.enclave_addr is None:
            raise TransportError("no enclave address configured")
        if self._enclave_sock is None:
            self._enclave_sock = socket.create_connection(self.enclave_addr, timeout=self.timeout)
            self._enclave_sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._enclave_sock.settimeout(self.timeout)
            send_frame(self._enclave_sock, bytes([self.party]))
        wire = payload
        if self.enclave_key is not None:
            wire = seal(self.enclave_key, self._next_nonce(), payload)
        self.round_no += 1
        self.transcript.append(self.round_no, self.party, ENCLAVE_ID, len(wire), tag)
        send_frame(self._enclave_sock, wire)
        resp = recv_frame(self._enclave_sock)
        if self.enclave_key is not None:
            resp = open_sealed(self.enclave_key, resp)
        self.round_no += 1
        self.transcript.append(self.round_no, ENCLAVE_ID, self.party, len(resp), tag)
        return resp

    def _next_nonce(self) -> int:
        self._enclave_nonce += 2  # party side uses even nonces, enclave odd
        return self._enclave_nonce

    def close(self) -> None:
        for s in self.socks.values():
            s.close()
        if self._enclave_sock is not None:
            self._enclave_sock.close()


# ---------------------------------------------------------------------------
# AEAD helpers for the enclave channel (TCP mode only)
# ---------------------------------------------------------------------------


def seal(key: bytes, nonce_counter: int, plaintext: bytes) -> bytes:
    from cryptography.hazmat.primitives.ciphers.aead import AESGCM

    nonce = nonce_counter.to_bytes(12, "big")
    return nonce + AESGCM(key).encrypt(nonce, plaintext, b"")


def open_sealed(key: bytes, wire: bytes) -> bytes:
    from cryptography.hazmat.primitives.ciphers.aead import AESGCM

    if len(wire) < 12:
        raise TransportError("sealed message truncated")
    return AESGCM(key).decrypt(wire[:12], wire[12:], b"")
