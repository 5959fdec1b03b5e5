"""2-out-of-3 replicated secret sharing over Z_{2^l} and GF(2).

A value x is split as x = s1 + s2 + s3 (mod 2^l); party i holds the pair
(s_i, s_{i+1}), stored here as (lo, hi).  Addition and scalar operations are
local; multiplication needs one reshare round: each party computes its
additive cross-term share, blinds it with a fresh zero-share, and sends the
result to its predecessor so everyone ends up holding a consistent pair
again.  Boolean sharing is the same structure under XOR/AND.

Constants are injected on the s1 component, which party 1 holds as lo and
party 3 holds as hi; both must apply the same adjustment or replication
breaks.

``PartyEngine`` bundles a party's channel, PRG streams, and preprocessing
store; protocol code is written once and executed by all three parties
(SPMD).  ``run_local`` drives three engine threads over the in-process
router, which is the test backend and the CLI default.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .ring import Ring
from .transport import (
    PARTIES,
    AesCtrPrg,
    Channel,
    InprocRouter,
    Metrics,
    SeedSetup,
    Transcript,
    TransportError,
    next_party,
    prev_party,
)


class ShareError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Share containers (one party's view)
# ---------------------------------------------------------------------------


@dataclass
class AVec:
    """This party's share pair of a vector of ring elements.

    Supports any numpy shape; lo/hi always travel together.  All methods here
    are communication-free.
    """

    ring: Ring
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        if self.lo.shape != self.hi.shape:
            raise ShareError("share components disagree on shape")

    @property
    def shape(self) -> tuple:
        return self.lo.shape

    @property
    def size(self) -> int:
        return self.lo.size

    def add(self, other: "AVec") -> "AVec":
        self._check(other)
        return AVec(self.ring, self.ring.add(self.lo, other.lo), self.ring.add(self.hi, other.hi))

    def sub(self, other: "AVec") -> "AVec":
        self._check(other)
        return AVec(self.ring, self.ring.sub(self.lo, other.lo), self.ring.sub(self.hi, other.hi))

    def neg(self) -> "AVec":
        return AVec(self.ring, self.ring.neg(self.lo), self.ring.neg(self.hi))

    def mul_public(self, c) -> "AVec":
        c = self._pub(c)
        return AVec(self.ring, self.ring.mul(self.lo, c), self.ring.mul(self.hi, c))

    def lshift_public(self, k: int) -> "AVec":
        return self.mul_public(1 << k)

    def reshape(self, *shape) -> "AVec":
        return AVec(self.ring, self.lo.reshape(*shape), self.hi.reshape(*shape))

    def ravel(self) -> "AVec":
        return AVec(self.ring, self.lo.ravel(), self.hi.ravel())

    def copy(self) -> "AVec":
        return AVec(self.ring, self.lo.copy(), self.hi.copy())

    def sum(self, axis=None) -> "AVec":
        lo = self.lo.sum(axis=axis, dtype=np.uint64)
        hi = self.hi.sum(axis=axis, dtype=np.uint64)
        return AVec(self.ring, self.ring.reduce(np.asarray(lo)), self.ring.reduce(np.asarray(hi)))

    def take(self, idx) -> "AVec":
        return AVec(self.ring, self.lo[idx], self.hi[idx])

    def put(self, idx, value: "AVec") -> None:
        self.lo[idx] = value.lo
        self.hi[idx] = value.hi

    def repeat(self, n: int) -> "AVec":
        return AVec(self.ring, np.repeat(self.lo, n), np.repeat(self.hi, n))

    def tile(self, n: int) -> "AVec":
        return AVec(self.ring, np.tile(self.lo, n), np.tile(self.hi, n))

    def broadcast_to(self, shape) -> "AVec":
        return AVec(self.ring, np.broadcast_to(self.lo, shape), np.broadcast_to(self.hi, shape))

    def _pub(self, c):
        if isinstance(c, np.ndarray):
            return c.astype(np.uint64)
        return int(c) & self.ring.mask

    def _check(self, other: "AVec") -> None:
        if other.ring.width != self.ring.width:
            raise ShareError(f"ring mismatch: {self.ring.width} vs {other.ring.width}")


def concat_avec(parts: Sequence[AVec]) -> AVec:
    ring = parts[0].ring
    return AVec(ring, np.concatenate([p.lo for p in parts]), np.concatenate([p.hi for p in parts]))


def ring_down(x: AVec, target: Ring) -> AVec:
    """Reinterpret shares in a smaller ring (local; exact when the value fits).

    Valid because 2^t divides 2^l: reducing each additive component mod 2^t
    preserves the sum mod 2^t.
    """
    if target.width > x.ring.width:
        raise ShareError("can only move shares to a smaller ring")
    return AVec(target, target.reduce(x.lo), target.reduce(x.hi))


@dataclass
class BitVec:
    """XOR-shared bits; values live in {0,1} as uint8, any shape."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        if self.lo.shape != self.hi.shape:
            raise ShareError("share components disagree on shape")

    @property
    def shape(self) -> tuple:
        return self.lo.shape

    @property
    def size(self) -> int:
        return self.lo.size

    def xor(self, other: "BitVec") -> "BitVec":
        return BitVec(self.lo ^ other.lo, self.hi ^ other.hi)

    def mask_public(self, keep: np.ndarray) -> "BitVec":
        keep = keep.astype(np.uint8)
        return BitVec(self.lo & keep, self.hi & keep)

    def reshape(self, *shape) -> "BitVec":
        return BitVec(self.lo.reshape(*shape), self.hi.reshape(*shape))

    def ravel(self) -> "BitVec":
        return BitVec(self.lo.ravel(), self.hi.ravel())

    def copy(self) -> "BitVec":
        return BitVec(self.lo.copy(), self.hi.copy())

    def take(self, idx) -> "BitVec":
        return BitVec(self.lo[idx], self.hi[idx])

    def repeat(self, n: int) -> "BitVec":
        return BitVec(np.repeat(self.lo, n), np.repeat(self.hi, n))

    def tile(self, n: int) -> "BitVec":
        return BitVec(np.tile(self.lo, n), np.tile(self.hi, n))


def concat_bits(parts: Sequence[BitVec]) -> BitVec:
    return BitVec(np.concatenate([p.lo for p in parts]), np.concatenate([p.hi for p in parts]))


# ---------------------------------------------------------------------------
# Dealer-side share construction (trusted, local)
# ---------------------------------------------------------------------------


def make_arith_shares(values: np.ndarray, ring: Ring, rand_words: Callable[[int], np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Split values into three replicated pairs [(s_i, s_{i+1})] for i=1..3."""
    v = ring.reduce(np.asarray(values, dtype=np.uint64)).ravel()
    s1 = ring.reduce(rand_words(v.size))
    s2 = ring.reduce(rand_words(v.size))
    s3 = ring.sub(ring.sub(v, s1), s2)
    return [(s1, s2), (s2, s3), (s3, s1)]


def make_bit_shares(bits: np.ndarray, rand_bits: Callable[[int], np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
    b = (np.asarray(bits).ravel() & 1).astype(np.uint8)
    s1 = rand_bits(b.size).astype(np.uint8)
    s2 = rand_bits(b.size).astype(np.uint8)
    s3 = b ^ s1 ^ s2
    return [(s1, s2), (s2, s3), (s3, s1)]


def reconstruct_pairs(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], ring: Ring, check: bool = True) -> np.ndarray:
    """Trusted-side reconstruction from the three replicated pairs."""
    (a_lo, a_hi), (b_lo, b_hi), (c_lo, c_hi) = pairs
    if check:
        if not (np.array_equal(a_hi, b_lo) and np.array_equal(b_hi, c_lo) and np.array_equal(c_hi, a_lo)):
            raise ShareError("replication inconsistency between party pairs")
    return ring.reduce(a_lo.astype(np.uint64) + b_lo.astype(np.uint64) + c_lo.astype(np.uint64))


# ---------------------------------------------------------------------------
# Wire packing
# ---------------------------------------------------------------------------


def pack_words(arr: np.ndarray, ring: Ring) -> bytes:
    flat = np.ascontiguousarray(arr.ravel(), dtype=np.uint64)
    if ring.width == 64:
        return flat.astype("<u8").tobytes()
    if ring.width == 32:
        return flat.astype("<u4").tobytes()
    return flat.astype(np.uint8).tobytes()


def unpack_words(raw: bytes, ring: Ring, shape) -> np.ndarray:
    if ring.width == 64:
        out = np.frombuffer(raw, dtype="<u8").astype(np.uint64)
    elif ring.width == 32:
        out = np.frombuffer(raw, dtype="<u4").astype(np.uint64)
    else:
        out = np.frombuffer(raw, dtype=np.uint8).astype(np.uint64)
    return out.reshape(shape)


def pack_bits(arr: np.ndarray) -> bytes:
    return np.packbits(arr.ravel().astype(np.uint8)).tobytes()


def unpack_bits(raw: bytes, shape) -> np.ndarray:
    n = int(np.prod(shape)) if shape else 1
    out = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:n]
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# Party engine
# ---------------------------------------------------------------------------


class PartyEngine:
    """One party's execution context: channel, PRG streams, preprocessing.

    Protocol code receives an engine and calls its communication primitives;
    the same code body runs on all three parties.
    """

    def __init__(self, party: int, chan: Channel, seeds: SeedSetup, material=None, lane_limit: int = 1 << 22):
        if party not in PARTIES:
            raise ShareError(f"invalid party id {party}")
        self.party = party
        self.chan = chan
        self.seeds = seeds
        self.material = material
        self.lane_limit = lane_limit
        # Pairwise streams: with_next is shared with the successor, with_prev
        # with the predecessor.  Zero-shares subtract one from the other.
        self.prg_next = AesCtrPrg(seeds.pair_seeds[party])
        self.prg_prev = AesCtrPrg(seeds.pair_seeds[prev_party(party)])
        self.prg_local = AesCtrPrg(seeds.local_seeds[party])
        self._phase: List[str] = []

    # -- phase tagging ------------------------------------------------------

    def phase(self, label: str):
        return _Phase(self, label)

    def tag(self, fallback: str) -> str:
        return self._phase[-1] if self._phase else fallback

    # -- randomness ---------------------------------------------------------

    def zero_arith(self, n: int, ring: Ring) -> np.ndarray:
        """alpha_i = F(seed_{i,i+1}) - F(seed_{i-1,i}); the three sum to zero."""
        a = self.prg_next.next_words(n, ring.width)
        b = self.prg_prev.next_words(n, ring.width)
        return ring.sub(a, b)

    def zero_bits(self, n: int) -> np.ndarray:
        return self.prg_next.next_bits(n) ^ self.prg_prev.next_bits(n)

    # -- constants ----------------------------------------------------------

    def const_a(self, values, ring: Ring, shape=None) -> AVec:
        """Share of a public constant: the s1 component carries the value."""
        arr = np.asarray(values, dtype=np.uint64)
        if shape is not None:
            arr = np.broadcast_to(arr, shape).copy()
        arr = ring.reduce(arr)
        zero = np.zeros_like(arr)
        if self.party == 1:
            return AVec(ring, arr.copy(), zero.copy())
        if self.party == 3:
            return AVec(ring, zero.copy(), arr.copy())
        return AVec(ring, zero.copy(), zero.copy())

    def const_bits(self, bits, shape=None) -> BitVec:
        arr = (np.asarray(bits) & 1).astype(np.uint8)
        if shape is not None:
            arr = np.broadcast_to(arr, shape).copy()
        zero = np.zeros_like(arr)
        if self.party == 1:
            return BitVec(arr.copy(), zero.copy())
        if self.party == 3:
            return BitVec(zero.copy(), arr.copy())
        return BitVec(zero.copy(), zero.copy())

    def zero_like(self, x: AVec) -> AVec:
        """Trivial (all-zero) sharing of the zero vector in x's shape."""
        return AVec(x.ring, np.zeros(x.shape, dtype=np.uint64), np.zeros(x.shape, dtype=np.uint64))

    def add_pub(self, x: AVec, c) -> AVec:
        c = np.asarray(c, dtype=np.uint64) if isinstance(c, np.ndarray) else int(c) & x.ring.mask
        lo, hi = x.lo, x.hi
        if self.party == 1:
            lo = x.ring.add(lo, c)
        elif self.party == 3:
            hi = x.ring.add(hi, c)
        return AVec(x.ring, lo if lo is not x.lo else lo.copy(), hi if hi is not x.hi else hi.copy())

    def sub_pub(self, x: AVec, c) -> AVec:
        if isinstance(c, np.ndarray):
            return self.add_pub(x, x.ring.neg(c.astype(np.uint64)))
        return self.add_pub(x, x.ring.neg(int(c)))

    def rsub_pub(self, c, x: AVec) -> AVec:
        return self.add_pub(x.neg(), c)

    def xor_pub(self, x: BitVec, bits) -> BitVec:
        arr = (np.broadcast_to(np.asarray(bits), x.shape) & 1).astype(np.uint8)
        if self.party == 1:
            return BitVec(x.lo ^ arr, x.hi.copy())
        if self.party == 3:
            return BitVec(x.lo.copy(), x.hi ^ arr)
        return BitVec(x.lo.copy(), x.hi.copy())

    def bnot(self, x: BitVec) -> BitVec:
        return self.xor_pub(x, np.ones(x.shape, dtype=np.uint8))

    # -- communicating primitives -------------------------------------------

    def open_a(self, x: AVec, tag: str = "open") -> np.ndarray:
        """Reconstruct to all: send lo to the successor (1 round, l bits/party)."""
        tag = self.tag(tag)
        out = pack_words(x.lo, x.ring)
        got = self.chan.exchange({next_party(self.party): out}, (prev_party(self.party),), tag)
        third = unpack_words(got[prev_party(self.party)], x.ring, x.shape)
        return x.ring.reduce(x.lo.astype(np.uint64) + x.hi.astype(np.uint64) + third)

    def open_bits(self, x: BitVec, tag: str = "open_bits") -> np.ndarray:
        tag = self.tag(tag)
        out = pack_bits(x.lo)
        got = self.chan.exchange({next_party(self.party): out}, (prev_party(self.party),), tag)
        third = unpack_bits(got[prev_party(self.party)], x.shape)
        return x.lo ^ x.hi ^ third

    def mul(self, x: AVec, y: AVec, tag: str = "mul") -> AVec:
        """Hadamard product with one reshare round (l bits per party per element)."""
        tag = self.tag(tag)
        ring = x.ring
        x._check(y)
        z = ring.reduce(
            x.lo.astype(np.uint64) * y.lo.astype(np.uint64)
            + x.hi.astype(np.uint64) * y.lo.astype(np.uint64)
            + x.lo.astype(np.uint64) * y.hi.astype(np.uint64)
        )
        z = ring.add(z, self.zero_arith(z.size, ring).reshape(z.shape))
        out = pack_words(z, ring)
        got = self.chan.exchange({prev_party(self.party): out}, (next_party(self.party),), tag)
        hi = unpack_words(got[next_party(self.party)], ring, z.shape)
        return AVec(ring, z, hi)

    def and_bits(self, x: BitVec, y: BitVec, tag: str = "and") -> BitVec:
        tag = self.tag(tag)
        z = (x.lo & y.lo) ^ (x.hi & y.lo) ^ (x.lo & y.hi)
        z ^= self.zero_bits(z.size).reshape(z.shape)
        out = pack_bits(z)
        got = self.chan.exchange({prev_party(self.party): out}, (next_party(self.party),), tag)
        hi = unpack_bits(got[next_party(self.party)], z.shape)
        return BitVec(z, hi)

    def or_bits(self, x: BitVec, y: BitVec, tag: str = "or") -> BitVec:
        return x.xor(y).xor(self.and_bits(x, y, tag))

    def share_from(self, values: Optional[np.ndarray], ring: Ring, shape, dealer: int, tag: str = "input") -> AVec:
        """Input sharing: the dealer party splits its private vector and
        distributes one pair component to each neighbour (1 round)."""
        tag = self.tag(tag)
        n = int(np.prod(shape)) if shape else 1
        if self.party == dealer:
            assert values is not None
            pairs = make_arith_shares(values, ring, lambda k: self.prg_local.next_words(k, ring.width))
            mine = pairs[self.party - 1]
            msgs = {}
            for other in PARTIES:
                if other != dealer:
                    lo, hi = pairs[other - 1]
                    msgs[other] = pack_words(lo, ring) + pack_words(hi, ring)
            self.chan.exchange(msgs, (), tag)
            return AVec(ring, mine[0].reshape(shape), mine[1].reshape(shape))
        got = self.chan.exchange({}, (dealer,), tag)
        raw = got[dealer]
        half = len(raw) // 2
        lo = unpack_words(raw[:half], ring, shape)
        hi = unpack_words(raw[half:], ring, shape)
        return AVec(ring, lo, hi)


class _Phase:
    def __init__(self, eng: PartyEngine, label: str):
        self.eng = eng
        self.label = label

    def __enter__(self):
        self.eng._phase.append(self.label)
        return self

    def __exit__(self, *exc):
        self.eng._phase.pop()
        return False


# ---------------------------------------------------------------------------
# Share files
# ---------------------------------------------------------------------------

SHARE_MAGIC = b"OBS1"
_SHARE_HEADER = struct.Struct("<4sBBBxQ")  # magic, width, kind, party, count


def write_share_file(path: str, vec_lo: np.ndarray, vec_hi: np.ndarray, ring: Ring, party: int, kind: int = 0) -> None:
    """kind 0 = arithmetic; share pairs are stored interleaved little-endian."""
    lo = np.ascontiguousarray(vec_lo.ravel(), dtype=np.uint64)
    hi = np.ascontiguousarray(vec_hi.ravel(), dtype=np.uint64)
    inter = np.empty(lo.size * 2, dtype=np.uint64)
    inter[0::2] = lo
    inter[1::2] = hi
    with open(path, "wb") as f:
        f.write(_SHARE_HEADER.pack(SHARE_MAGIC, ring.width, kind, party, lo.size))
        f.write(pack_words(inter, ring))


def read_share_file(path: str) -> Tuple[np.ndarray, np.ndarray, Ring, int]:
    with open(path, "rb") as f:
        head = f.read(_SHARE_HEADER.size)
        magic, width, kind, party, count = _SHARE_HEADER.unpack(head)
        if magic != SHARE_MAGIC:
            raise ShareError(f"{path}: not a share file")
        ring = Ring(width)
        raw = f.read(2 * count * ring.nbytes)
        inter = unpack_words(raw, ring, (2 * count,))
    return inter[0::2], inter[1::2], ring, party


# ---------------------------------------------------------------------------
# Local (in-process) execution harness
# ---------------------------------------------------------------------------


@dataclass
class LocalRun:
    results: List
    transcript: Transcript
    metrics: Metrics


def run_local(
    fn: Callable[[PartyEngine], object],
    *,
    seeds: Union[SeedSetup, int],
    materials: Optional[Sequence] = None,
    enclave_handler: Optional[Callable[[List[bytes]], List[bytes]]] = None,
    lane_limit: int = 1 << 22,
    timeout: float = 300.0,
) -> LocalRun:
    """Run the same protocol body on three engine threads and collect results.

    Exceptions in any party thread are re-raised here after all threads stop.
    """
    if isinstance(seeds, int):
        seeds = SeedSetup.from_int(seeds)
    router = InprocRouter(timeout=timeout)
    if enclave_handler is not None:
        router.attach_enclave(enclave_handler)
    engines = [
        PartyEngine(i, router.channel(i), seeds, material=materials[i - 1] if materials else None, lane_limit=lane_limit)
        for i in PARTIES
    ]
    results: List = [None, None, None]
    errors: List = [None, None, None]

    def body(idx: int) -> None:
        try:
            results[idx] = fn(engines[idx])
        except BaseException as e:  # noqa: BLE001 - propagated below
            errors[idx] = e
            router._barrier.abort()

    threads = [threading.Thread(target=body, args=(i,), name=f"party{i + 1}", daemon=True) for i in range(3)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=timeout * 4)
        if t.is_alive():
            router._barrier.abort()
            raise TransportError("party thread failed to finish")
    for e in errors:
        if e is not None and not isinstance(e, TransportError):
            raise e
    for e in errors:
        if e is not None:
            raise e
    return LocalRun(results=results, transcript=router.transcript, metrics=Metrics.from_transcript(router.transcript))


def open_results(run: LocalRun, ring: Ring, pick=lambda r: r) -> np.ndarray:
    """Reconstruct a vector from the three parties' returned AVecs (test aid)."""
    pairs = [(pick(r).lo, pick(r).hi) for r in run.results]
    return reconstruct_pairs(pairs, ring).reshape(pick(run.results[0]).shape)
