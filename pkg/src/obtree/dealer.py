"""Trusted dealer: correlated randomness generation, storage, and files.

Three material kinds cover every online gadget:

* ``("edabit", l)``   - random r shared in Z_{2^l} plus boolean shares of its
  bits (bit words packed into one l-bit word per element).
* ``("dabit", l)``    - random bit shared both arithmetically and boolean.
* ``("trunc", l, k)`` - an edabit extended with arithmetic shares of r >> k.

A ``MaterialStore`` holds banked arrays for one party with per-kind cursors;
requests past the end raise ``MaterialError`` (the estimator exists so that
never happens in a provisioned run).  ``LiveDealer`` serves the same
interface inside a single process by generating batches on demand,
deterministically from a seed, handing each of the three parties its view of
the same batch and dropping the batch once all three collected it.
"""

from __future__ import annotations

import struct
import threading
from typing import Dict, List, Optional, Tuple

import numpy as np

from .gadgets import MaterialError, MaterialKey, Needs, dabit_key, edabit_key, trunc_key
from .ring import RING8, RING32, RING64, Ring
from .rss import AVec, BitVec, make_arith_shares, make_bit_shares, pack_words, unpack_words
from .transport import AesCtrPrg, derive_seed

_RINGS = {8: RING8, 32: RING32, 64: RING64}


def _ring_for(width: int) -> Ring:
    return _RINGS.get(width) or Ring(width)

MATERIAL_MAGIC = b"OBD1"
_KIND_CODES = {"edabit": 0, "dabit": 1, "trunc": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_SECTION = struct.Struct("<BBBxQ")  # kind, width, k, pad, count


def _gen_edabits(count: int, ring: Ring, prg: AesCtrPrg):
    """Per-party arrays: (r_lo, r_hi, bit_lo, bit_hi), bit shares as words."""
    r = prg.next_words(count, ring.width)
    arith = make_arith_shares(r, ring, lambda n: prg.next_words(n, ring.width))
    planes = _value_bit_words(r, ring, prg)
    return [arith[i] + planes[i] for i in range(3)]


def _value_bit_words(values: np.ndarray, ring: Ring, prg: AesCtrPrg):
    """Boolean word-shares of the bits of `values`: lo ^ hi ^ third = value."""
    s1 = prg.next_words(values.size, ring.width)
    s2 = prg.next_words(values.size, ring.width)
    s3 = values ^ s1 ^ s2
    pairs = [(s1, s2), (s2, s3), (s3, s1)]
    return [(lo.copy(), hi.copy()) for lo, hi in pairs]


def _gen_dabits(count: int, ring: Ring, prg: AesCtrPrg):
    bits = prg.next_bits(count)
    arith = make_arith_shares(bits.astype(np.uint64), ring, lambda n: prg.next_words(n, ring.width))
    bools = make_bit_shares(bits, lambda n: prg.next_bits(n))
    return [arith[i] + bools[i] for i in range(3)]


def _gen_truncpairs(count: int, ring: Ring, k: int, prg: AesCtrPrg):
    r = prg.next_words(count, ring.width)
    arith = make_arith_shares(r, ring, lambda n: prg.next_words(n, ring.width))
    planes = _value_bit_words(r, ring, prg)
    shifted = make_arith_shares(r >> np.uint64(k), ring, lambda n: prg.next_words(n, ring.width))
    return [arith[i] + planes[i] + shifted[i] for i in range(3)]


def generate_banks(key: MaterialKey, count: int, prg: AesCtrPrg) -> List[Tuple[np.ndarray, ...]]:
    kind = key[0]
    ring = _ring_for(key[1])
    if kind == "edabit":
        return _gen_edabits(count, ring, prg)
    if kind == "dabit":
        return _gen_dabits(count, ring, prg)
    if kind == "trunc":
        return _gen_truncpairs(count, ring, key[2], prg)
    raise ValueError(f"unknown material kind {key!r}")


class MaterialStore:
    """One party's preprocessed material, banked per kind with a cursor."""

    def __init__(self) -> None:
        self._banks: Dict[MaterialKey, Tuple[np.ndarray, ...]] = {}
        self._cursor: Dict[MaterialKey, int] = {}
        self.consumed = Needs()

    def add_bank(self, key: MaterialKey, arrays: Tuple[np.ndarray, ...]) -> None:
        if key in self._banks:
            self._banks[key] = tuple(np.concatenate([old, new]) for old, new in zip(self._banks[key], arrays))
        else:
            self._banks[key] = tuple(arrays)
            self._cursor.setdefault(key, 0)

    def remaining(self, key: MaterialKey) -> int:
        if key not in self._banks:
            return 0
        return self._banks[key][0].shape[0] - self._cursor[key]

    def _slice(self, key: MaterialKey, n: int) -> Tuple[np.ndarray, ...]:
        if self.remaining(key) < n:
            raise MaterialError(
                f"material exhausted for {key}: requested {n}, have {self.remaining(key)}")
        at = self._cursor[key]
        self._cursor[key] = at + n
        self.consumed.bump(key, n)
        return tuple(a[at : at + n] for a in self._banks[key])

    def take_edabits(self, ring: Ring, n: int):
        r_lo, r_hi, b_lo, b_hi = self._slice(edabit_key(ring.width), n)
        return AVec(ring, r_lo.copy(), r_hi.copy()), (b_lo, b_hi)

    def take_dabits(self, ring: Ring, n: int):
        a_lo, a_hi, b_lo, b_hi = self._slice(dabit_key(ring.width), n)
        return AVec(ring, a_lo.copy(), a_hi.copy()), BitVec(b_lo.copy(), b_hi.copy())

    def take_truncpairs(self, ring: Ring, k: int, n: int):
        r_lo, r_hi, b_lo, b_hi, s_lo, s_hi = self._slice(trunc_key(ring.width, k), n)
        return (AVec(ring, r_lo.copy(), r_hi.copy()), (b_lo, b_hi),
                AVec(ring, s_lo.copy(), s_hi.copy()))

    # ---- serialization ----

    def to_bytes(self) -> bytes:
        chunks = [MATERIAL_MAGIC, struct.pack("<I", len(self._banks))]
        for key in sorted(self._banks, key=repr):
            arrays = self._banks[key]
            ring = _ring_for(key[1])
            k = key[2] if key[0] == "trunc" else 0
            count = arrays[0].shape[0]
            chunks.append(_SECTION.pack(_KIND_CODES[key[0]], key[1], k, count))
            for arr in arrays:
                if arr.dtype == np.uint8:
                    chunks.append(arr.tobytes())
                else:
                    chunks.append(pack_words(arr, ring))
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "MaterialStore":
        if raw[:4] != MATERIAL_MAGIC:
            raise ValueError("not a material file")
        store = cls()
        nsec = struct.unpack_from("<I", raw, 4)[0]
        at = 8
        for _ in range(nsec):
            code, width, k, count = _SECTION.unpack_from(raw, at)
            at += _SECTION.size
            kind = _KIND_NAMES[code]
            ring = _ring_for(width)
            wordbytes = ring.nbytes
            arrays = []
            layout = {"edabit": "wwww", "dabit": "wwbb", "trunc": "wwwwww"}[kind]
            for spec in layout:
                if spec == "w":
                    arrays.append(unpack_words(raw[at : at + count * wordbytes], ring, (count,)))
                    at += count * wordbytes
                else:
                    arrays.append(np.frombuffer(raw[at : at + count], dtype=np.uint8).copy())
                    at += count
            key = trunc_key(width, k) if kind == "trunc" else (kind, width)
            store.add_bank(key, tuple(arrays))
        return store

    def to_file(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_file(cls, path) -> "MaterialStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def generate_material(needs: Dict[MaterialKey, int], seed: bytes) -> List[MaterialStore]:
    """Pre-generate stores for all three parties, deterministically from seed."""
    stores = [MaterialStore() for _ in range(3)]
    for key in sorted(needs, key=repr):
        count = int(needs[key])
        if count <= 0:
            continue
        prg = AesCtrPrg(derive_seed(seed, f"material/{key!r}"))
        banks = generate_banks(key, count, prg)
        for store, bank in zip(stores, banks):
            store.add_bank(key, bank)
    return stores


class LiveDealer:
    """On-demand in-process dealer shared by the three party engines.

    Batch i of a kind is generated from a seed derived from (kind, i), kept
    until every party picked it up, then dropped, so memory stays bounded by
    one outstanding batch per kind regardless of run length.
    """

    def __init__(self, seed: bytes) -> None:
        self._seed = seed
        self._lock = threading.Lock()
        self._served: Dict[Tuple[int, MaterialKey], int] = {}
        self._cache: Dict[Tuple[MaterialKey, int], Tuple[list, int]] = {}

    def view(self, party: int) -> "LiveStoreView":
        return LiveStoreView(self, party)

    def _take(self, party: int, key: MaterialKey, n: int) -> Tuple[np.ndarray, ...]:
        with self._lock:
            idx = self._served.get((party, key), 0)
            self._served[(party, key)] = idx + 1
            cached = self._cache.get((key, idx))
            if cached is None:
                prg = AesCtrPrg(derive_seed(self._seed, f"live/{key!r}/{idx}"))
                banks = generate_banks(key, n, prg)
                cached = (banks, 0)
            banks, picked = cached
            if banks[0][0].shape[0] != n:
                raise MaterialError(
                    f"parties disagree on batch size for {key}: {banks[0][0].shape[0]} vs {n}")
            mine = banks[party - 1]
            if picked + 1 == 3:
                self._cache.pop((key, idx), None)
            else:
                self._cache[(key, idx)] = (banks, picked + 1)
            return mine


class LiveStoreView:
    """Adapter giving one engine the MaterialStore interface over a LiveDealer."""

    def __init__(self, dealer: LiveDealer, party: int) -> None:
        self._dealer = dealer
        self._party = party
        self.consumed = Needs()

    def take_edabits(self, ring: Ring, n: int):
        r_lo, r_hi, b_lo, b_hi = self._dealer._take(self._party, edabit_key(ring.width), n)
        self.consumed.bump(edabit_key(ring.width), n)
        return AVec(ring, r_lo.copy(), r_hi.copy()), (b_lo, b_hi)

    def take_dabits(self, ring: Ring, n: int):
        a_lo, a_hi, b_lo, b_hi = self._dealer._take(self._party, dabit_key(ring.width), n)
        self.consumed.bump(dabit_key(ring.width), n)
        return AVec(ring, a_lo.copy(), a_hi.copy()), BitVec(b_lo.copy(), b_hi.copy())

    def take_truncpairs(self, ring: Ring, k: int, n: int):
        r_lo, r_hi, b_lo, b_hi, s_lo, s_hi = self._dealer._take(self._party, trunc_key(ring.width, k), n)
        self.consumed.bump(trunc_key(ring.width, k), n)
        return (AVec(ring, r_lo.copy(), r_hi.copy()), (b_lo, b_hi),
                AVec(ring, s_lo.copy(), s_hi.copy()))


def share_values(values: np.ndarray, ring: Ring, seed: bytes) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Split a plaintext array into the three replicated share pairs."""
    prg = AesCtrPrg(derive_seed(seed, "input"))
    flat = ring.reduce(values.astype(np.uint64).ravel())
    return make_arith_shares(flat, ring, lambda n: prg.next_words(n, ring.width))
