"""Plaintext decision-tree reference: data model, exact trainer, inference.

Trees are complete binary trees of a fixed depth stored heap-style: slot 0
is the root, slot i has children 2i+1 and 2i+2.  Every slot carries a type
in F (0 internal, 1 leaf, 2 dummy) and a payload in T: a feature index for
internal slots, a placeholder feature for leaf and dummy slots at inner
levels (so traversal never branches on node type), and a class label at the
last level.  Placeholders come from a public seeded stream so independently
trained replicas agree byte-for-byte.

The trainer here is the exact-arithmetic reference the secure engine is
tested against: impurity scores are rationals, ties break to the lower
feature index, a node becomes a leaf when pure, empty, or out of features,
and an empty node inherits the counters of its nearest non-empty ancestor
for labeling.  ``split_decisions``/``majority_labels`` are also what the
attested helper runs on reconstructed counters, keeping the two paths
identical by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .transport import AesCtrPrg, derive_seed


class DataError(ValueError):
    pass


class TreeError(ValueError):
    pass


F_INTERNAL = 0
F_LEAF = 1
F_DUMMY = 2

WORST_SCORE = Fraction(2)  # strictly above any reachable impurity score


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def load_csv(path, min_columns: int = 2) -> np.ndarray:
    """Binary matrix, one sample per line, last column the label.

    Query files carry features only; those callers pass min_columns=1.
    """
    rows: List[List[int]] = []
    width: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if width is None:
                width = len(cells)
                if width < min_columns:
                    raise DataError(f"line {lineno}: need at least one feature and the label")
            elif len(cells) != width:
                raise DataError(f"line {lineno}: expected {width} columns, found {len(cells)}")
            row = []
            for col, cell in enumerate(cells):
                if cell not in ("0", "1"):
                    raise DataError(f"line {lineno}, column {col + 1}: {cell!r} is not a binary value")
                row.append(int(cell))
            rows.append(row)
    if not rows:
        raise DataError("dataset is empty")
    return np.array(rows, dtype=np.uint8)


def save_csv(path, data: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(data, dtype=np.uint8):
            fh.write(",".join(str(int(v)) for v in row) + "\n")


def check_dataset(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[1] < 2:
        raise DataError("dataset must be samples x (features + label) with at least one feature")
    bad = np.argwhere(data > 1)
    if bad.size:
        r, c = bad[0]
        raise DataError(f"row {int(r) + 1}, column {int(c) + 1}: value is not binary")
    return data.astype(np.uint8)


# ---------------------------------------------------------------------------
# Tree state
# ---------------------------------------------------------------------------


@dataclass
class TreeState:
    """Complete-tree payloads: depth levels, 2^depth - 1 slots."""

    depth: int
    T: np.ndarray
    F: np.ndarray

    def __post_init__(self) -> None:
        self.T = np.asarray(self.T, dtype=np.uint64)
        self.F = np.asarray(self.F, dtype=np.uint64)

    @property
    def slots(self) -> int:
        return (1 << self.depth) - 1

    def validate(self, n_columns: Optional[int] = None, filler: Optional[np.ndarray] = None) -> None:
        if self.depth < 1:
            raise TreeError("depth must be at least 1")
        if self.T.shape != (self.slots,) or self.F.shape != (self.slots,):
            raise TreeError(f"payload arrays must have {self.slots} slots")
        if not np.isin(self.F, (F_INTERNAL, F_LEAF, F_DUMMY)).all():
            raise TreeError("node types must be 0, 1, or 2")
        last = (1 << (self.depth - 1)) - 1
        for i in range(self.slots):
            at_last = i >= last
            if at_last:
                if self.F[i] == F_INTERNAL:
                    raise TreeError(f"slot {i}: internal node at the last level")
                if self.T[i] > 1:
                    raise TreeError(f"slot {i}: label {int(self.T[i])} is not binary")
            else:
                left, right = 2 * i + 1, 2 * i + 2
                if self.F[i] == F_INTERNAL:
                    if n_columns is not None and self.T[i] > n_columns - 2:
                        raise TreeError(f"slot {i}: split feature {int(self.T[i])} out of range")
                else:
                    if self.F[left] != F_DUMMY or self.F[right] != F_DUMMY:
                        raise TreeError(f"slot {i}: non-internal node has non-dummy children")
                    if filler is not None and self.T[i] != filler[i]:
                        raise TreeError(f"slot {i}: placeholder payload does not match the public stream")
        if self.F[0] == F_DUMMY:
            raise TreeError("root cannot be a dummy")

    def to_json(self) -> str:
        return json.dumps({"depth": self.depth,
                           "T": [int(v) for v in self.T],
                           "F": [int(v) for v in self.F]})

    @classmethod
    def from_json(cls, text: str) -> "TreeState":
        doc = json.loads(text)
        return cls(depth=int(doc["depth"]), T=np.array(doc["T"], dtype=np.uint64),
                   F=np.array(doc["F"], dtype=np.uint64))


def filler_values(seed: bytes, total: int, n_columns: int) -> np.ndarray:
    """Public placeholder features, one per heap slot, reproducible from seed.

    The seed is the shared filler seed itself, not a master secret; every
    participant expands the same stream locally.
    """
    if n_columns < 2:
        raise DataError("need at least one feature column")
    words = AesCtrPrg(seed).next_words(total, 64)
    return words % np.uint64(n_columns - 1)


# ---------------------------------------------------------------------------
# Counters and impurity
# ---------------------------------------------------------------------------


def node_counters(features: np.ndarray, labels: np.ndarray, members: np.ndarray) -> np.ndarray:
    """(3, 2*(d-1)) counter matrix for one node's sample subset.

    Row 0 counts samples per (feature, value) cell; rows 1 and 2 the same
    restricted to label 0 and label 1.
    """
    nf = features.shape[1]
    out = np.zeros((3, 2 * nf), dtype=np.int64)
    sub = features[members]
    suby = labels[members]
    for i in range(nf):
        ones = int(sub[:, i].sum())
        out[0, 2 * i] = sub.shape[0] - ones
        out[0, 2 * i + 1] = ones
        ones0 = int((sub[suby == 0, i]).sum())
        ones1 = int((sub[suby == 1, i]).sum())
        out[1, 2 * i] = int((suby == 0).sum()) - ones0
        out[1, 2 * i + 1] = ones0
        out[2, 2 * i] = int((suby == 1).sum()) - ones1
        out[2, 2 * i + 1] = ones1
    return out


def plaintext_gini(counters: np.ndarray, feature: int) -> Fraction:
    """Additive-form impurity score for splitting on `feature`; lower is better.

    Per branch j: (a_j^2 - m0_j^2 - m1_j^2) / (a_j * n); an empty branch
    contributes zero and an empty node scores WORST_SCORE outright.
    """
    c = np.asarray(counters, dtype=np.int64)
    a0, a1 = int(c[0, 2 * feature]), int(c[0, 2 * feature + 1])
    total = a0 + a1
    if total == 0:
        return WORST_SCORE
    score = Fraction(0)
    for j, a in ((0, a0), (1, a1)):
        if a == 0:
            continue
        m0 = int(c[1, 2 * feature + j])
        m1 = int(c[2, 2 * feature + j])
        score += Fraction(a * a - m0 * m0 - m1 * m1, a * total)
    return score


def split_decisions(counters: Sequence[np.ndarray], gammas: np.ndarray, types: np.ndarray
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-node split choice from exact counters.

    Returns (best_feature, new_type, is_internal, new_gammas).  A candidate
    splits unless it is pure, empty, or out of features; the chosen feature
    is removed from its subtree's feature budget.  Implemented with full
    masked scans so the work pattern does not depend on the data.
    """
    n = len(counters)
    nf = gammas.shape[1]
    sd = np.zeros(n, dtype=np.uint64)
    new_f = np.array(types, dtype=np.uint64, copy=True)
    is_int = np.zeros(n, dtype=bool)
    new_g = np.array(gammas, dtype=bool, copy=True)
    for k in range(n):
        c = counters[k]
        psi0 = int(c[1, 0]) + int(c[1, 1])
        psi1 = int(c[2, 0]) + int(c[2, 1])
        pure = psi0 == 0 or psi1 == 0
        featureless = not gammas[k].any()
        split = types[k] == F_LEAF and not (pure or featureless)
        best = 0
        best_score = WORST_SCORE
        for i in range(nf):
            score = plaintext_gini(c, i) if gammas[k, i] else WORST_SCORE
            if score < best_score:
                best, best_score = i, score
        sd[k] = best
        if split:
            is_int[k] = True
            new_f[k] = F_INTERNAL
            new_g[k, best] = False
    return sd, new_f, is_int, new_g


def majority_labels(counters: Sequence[np.ndarray]) -> np.ndarray:
    """Majority class per node (ties to 0), from label-marginal counters."""
    out = np.zeros(len(counters), dtype=np.uint64)
    for k, c in enumerate(counters):
        psi0 = int(c[1, 0]) + int(c[1, 1])
        psi1 = int(c[2, 0]) + int(c[2, 1])
        out[k] = 1 if psi1 > psi0 else 0
    return out


# ---------------------------------------------------------------------------
# Reference trainer and inference
# ---------------------------------------------------------------------------


def plaintext_train(data: np.ndarray, depth: int, seed: bytes) -> TreeState:
    data = check_dataset(data)
    if depth < 1:
        raise TreeError("depth must be at least 1")
    features = data[:, :-1]
    labels = data[:, -1]
    nf = features.shape[1]
    total = (1 << depth) - 1
    fill = filler_values(derive_seed(seed, "filler"), total, data.shape[1])
    T = np.zeros(total, dtype=np.uint64)
    F = np.zeros(total, dtype=np.uint64)

    members: Dict[int, np.ndarray] = {0: np.arange(data.shape[0])}
    gammas: Dict[int, np.ndarray] = {0: np.ones(nf, dtype=bool)}
    types: Dict[int, int] = {0: F_LEAF}
    eff: Dict[int, np.ndarray] = {}

    for level in range(depth):
        slots = range((1 << level) - 1, (1 << (level + 1)) - 1)
        counters = {}
        for s in slots:
            own = members.get(s, np.arange(0))
            counters[s] = node_counters(features, labels, own)
            if own.size > 0:
                eff[s] = counters[s]
            elif level == 0:
                raise DataError("dataset is empty")
            else:
                eff[s] = eff[(s - 1) // 2]
        if level < depth - 1:
            slot_list = list(slots)
            gam = np.stack([gammas[s] for s in slot_list])
            typ = np.array([types[s] for s in slot_list], dtype=np.uint64)
            sd, new_f, is_int, new_g = split_decisions([counters[s] for s in slot_list], gam, typ)
            for j, s in enumerate(slot_list):
                F[s] = new_f[j]
                T[s] = sd[j] if is_int[j] else fill[s]
                left, right = 2 * s + 1, 2 * s + 2
                if is_int[j]:
                    types[left] = types[right] = F_LEAF
                    own = members.get(s, np.arange(0))
                    go_right = features[own, int(sd[j])] == 1
                    members[left] = own[~go_right]
                    members[right] = own[go_right]
                else:
                    types[left] = types[right] = F_DUMMY
                gammas[left] = new_g[j].copy()
                gammas[right] = new_g[j].copy()
        else:
            slot_list = list(slots)
            lab = majority_labels([eff[s] for s in slot_list])
            for j, s in enumerate(slot_list):
                T[s] = lab[j]
                F[s] = types[s]
    return TreeState(depth=depth, T=T, F=F)


def plaintext_infer(tree: TreeState, query: np.ndarray) -> int:
    """Always-descend walk: at every inner level branch on the stored feature
    (a placeholder at leaf and dummy slots), read the label at the bottom."""
    node = 0
    for _ in range(tree.depth - 1):
        feat = int(tree.T[node])
        node = 2 * node + 1 + int(query[feat])
    return int(tree.T[node])


def random_tree(rng: np.random.Generator, depth: int, n_columns: int) -> TreeState:
    """A structurally valid random tree (labels replicated into dummies the way
    training leaves them: every last-level slot carries a label)."""
    nf = n_columns - 1
    total = (1 << depth) - 1
    T = np.zeros(total, dtype=np.uint64)
    F = np.full(total, F_DUMMY, dtype=np.uint64)
    F[0] = F_INTERNAL if (depth > 1 and rng.integers(0, 4) > 0) else F_LEAF
    last = (1 << (depth - 1)) - 1
    for i in range(total):
        if i >= last:
            if F[i] == F_INTERNAL:
                F[i] = F_LEAF
            T[i] = rng.integers(0, 2)
            continue
        T[i] = rng.integers(0, nf)
        if F[i] == F_INTERNAL:
            for child in (2 * i + 1, 2 * i + 2):
                F[child] = F_INTERNAL if rng.integers(0, 3) > 0 else F_LEAF
    tree = TreeState(depth=depth, T=T, F=F)
    tree.validate(n_columns=n_columns)
    return tree
