"""Multiplex bipartite interaction graphs: loading, splitting, synthesis."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .sparse import SparseMatrix, normalize

_HEADER = re.compile(r"#\s*users=(\d+)\s+items=(\d+)\s+behaviors=(\d+)")


class DatasetError(ValueError):
    """Malformed dataset file or out-of-range index."""


@dataclass(frozen=True, eq=False)
class MultiplexGraph:
    """``n_behaviors`` binary ``n_users x n_items`` matrices; the last one is the target."""

    n_users: int
    n_items: int
    interactions: tuple[SparseMatrix, ...]
    behavior_names: tuple[str, ...] | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "interactions", tuple(self.interactions))
        if self.n_users < 1 or self.n_items < 1 or not self.interactions:
            raise ValueError("graph needs at least one user, one item and one behavior")
        for m in self.interactions:
            if m.shape != (self.n_users, self.n_items):
                raise ValueError(f"interaction matrix shape {m.shape} != {(self.n_users, self.n_items)}")
            if m.nnz and not np.all(m.values == 1):
                raise ValueError("interaction matrices must be binary")
        if self.behavior_names is not None and len(self.behavior_names) != len(self.interactions):
            raise ValueError("one name per behavior required")

    @property
    def n_behaviors(self) -> int:
        return len(self.interactions)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def target_index(self) -> int:
        return self.n_behaviors - 1

    @property
    def target(self) -> SparseMatrix:
        return self.interactions[-1]

    def normalized_adjacency(self, k: int, scheme: str = "symmetric") -> SparseMatrix:
        key = ("adj", k, scheme)
        if key not in self._cache:
            self._cache[key] = normalize(build_adjacency(self, k), scheme)
        return self._cache[key]

    def pairs(self, k: int) -> np.ndarray:
        """Observed ``(user, item)`` pairs of behavior ``k`` as an ``nnz x 2`` array."""
        m = self.interactions[k]
        return np.stack([m.row_indices, m.col_indices], axis=1)

    def has(self, k: int, users, items) -> np.ndarray:
        """Vectorized membership test ``y^k[u, i] == 1``."""
        key = ("keys", k)
        if key not in self._cache:
            m = self.interactions[k]
            self._cache[key] = m.row_indices * self.n_items + m.col_indices  # sorted by CSR order
        keys = self._cache[key]
        q = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        if not len(keys):
            return np.zeros(q.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return keys[pos] == q


def from_triples(triples, n_users: int, n_items: int, n_behaviors: int, behavior_names=None) -> MultiplexGraph:
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    mats = []
    for k in range(n_behaviors):
        sel = triples[triples[:, 2] == k]
        mats.append(SparseMatrix.from_coo(sel[:, 0], sel[:, 1], None, (n_users, n_items), binary=True))
    return MultiplexGraph(n_users, n_items, tuple(mats), behavior_names)


def load_dataset(path, n_behaviors: int | None = None) -> MultiplexGraph:
    """Read whitespace-separated ``user item behavior`` lines (0-indexed).

    An optional first line ``#users=M items=N behaviors=K`` fixes the sizes;
    otherwise they are inferred as max index + 1.
    """
    header = None
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = _HEADER.match(line)
                if m and header is None and not rows:
                    header = tuple(int(x) for x in m.groups())
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
            try:
                u, i, b = (int(x) for x in parts)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer field in {line!r}") from None
            if min(u, i, b) < 0:
                raise DatasetError(f"{path}:{lineno}: negative index")
            rows.append((u, i, b))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
    if header is not None:
        n_users, n_items, k = header
    else:
        if not len(arr):
            raise DatasetError(f"{path}: no interactions and no header")
        n_users, n_items = int(arr[:, 0].max()) + 1, int(arr[:, 1].max()) + 1
        k = int(arr[:, 2].max()) + 1
    if n_behaviors is not None:
        k = n_behaviors
    for col, bound, what in ((0, n_users, "user"), (1, n_items, "item"), (2, k, "behavior")):
        bad = np.nonzero(arr[:, col] >= bound)[0]
        if len(bad):
            raise DatasetError(f"{path}: {what} index {arr[bad[0], col]} out of range (< {bound})")
    return from_triples(arr, n_users, n_items, k)


def save_dataset(g: MultiplexGraph, path) -> None:
    path = Path(path)
    lines = [f"#users={g.n_users} items={g.n_items} behaviors={g.n_behaviors}"]
    for k in range(g.n_behaviors):
        lines.extend(f"{u}\t{i}\t{k}" for u, i in g.pairs(k))
    path.write_text("\n".join(lines) + "\n")


def build_adjacency(g: MultiplexGraph, k: int) -> SparseMatrix:
    """Symmetric ``(M+N) x (M+N)`` adjacency with ``Y^k`` in the upper-right block."""
    if not 0 <= k < g.n_behaviors:
        raise IndexError(f"behavior {k} out of range [0, {g.n_behaviors})")
    y = g.interactions[k]
    m = g.n_users
    rows = np.concatenate([y.row_indices, y.col_indices + m])
    cols = np.concatenate([y.col_indices + m, y.row_indices])
    return SparseMatrix.from_coo(rows, cols, None, (g.n_nodes, g.n_nodes), binary=True)


# splitting ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SplitGraph:
    train: MultiplexGraph
    test_positives: dict[int, int]
    # per test user, the sampled negative items; None means rank against all items
    test_negatives: dict[int, np.ndarray] | None = None
    seed: int = 0

    def candidates(self, u: int) -> np.ndarray:
        """Held-out item first, then the negatives."""
        pos = self.test_positives[u]
        if self.test_negatives is not None:
            return np.concatenate([[pos], self.test_negatives[u]]).astype(np.int64)
        seen = set(self.train.target.row(u)[0].tolist())
        rest = [i for i in range(self.train.n_items) if i != pos and i not in seen]
        return np.array([pos] + rest, dtype=np.int64)


def leave_one_out_split(g: MultiplexGraph, seed: int = 0, n_negatives: int | None = 99) -> SplitGraph:
    """Hold out one target interaction per user, uniformly at random.

    A held-out pair is skipped when removing it would leave its user or its
    item without any training interaction.
    """
    rng = np.random.default_rng(seed)
    tgt = g.target
    user_deg = sum(np.diff(m.row_offsets) for m in g.interactions)
    item_deg = sum(np.bincount(m.col_indices, minlength=g.n_items) for m in g.interactions)
    held: dict[int, int] = {}
    for u in range(g.n_users):
        items, _ = tgt.row(u)
        if not len(items):
            continue
        i = int(items[rng.integers(len(items))])
        if user_deg[u] <= 1 or item_deg[i] <= 1:
            continue
        held[u] = i
        user_deg[u] -= 1
        item_deg[i] -= 1

    keep = np.ones(tgt.nnz, dtype=bool)
    for u, i in held.items():
        lo = tgt.row_offsets[u]
        keep[lo + np.searchsorted(tgt.row(u)[0], i)] = False
    new_target = SparseMatrix.from_coo(tgt.row_indices[keep], tgt.col_indices[keep], None, tgt.shape, binary=True)
    train = MultiplexGraph(g.n_users, g.n_items, g.interactions[:-1] + (new_target,), g.behavior_names)

    negatives = None
    if n_negatives is not None:
        negatives = {}
        all_items = np.arange(g.n_items)
        for u in sorted(held):
            pool = np.setdiff1d(all_items, tgt.row(u)[0], assume_unique=True)
            take = min(n_negatives, len(pool))
            negatives[u] = np.sort(rng.choice(pool, size=take, replace=False))
    return SplitGraph(train, held, negatives, seed)


# synthesis ----------------------------------------------------------------


@dataclass
class SynthConfig:
    n_users: int = 200
    n_items: int = 300
    n_behaviors: int = 3
    # one density per behavior (target last) or a single value for all
    density: float | Sequence[float] = (0.06, 0.04, 0.02)
    correlation: float = 0.7
    seed: int = 0
    n_factors: int = 8
    sharpness: float = 2.0

    def densities(self) -> list[float]:
        d = self.density
        dens = [float(d)] * self.n_behaviors if np.isscalar(d) else [float(x) for x in d]
        if len(dens) != self.n_behaviors:
            raise ValueError(f"{len(dens)} densities for {self.n_behaviors} behaviors")
        if not all(0 < x <= 1 for x in dens):
            raise ValueError("densities must lie in (0, 1]")
        if not -1 <= self.correlation <= 1:
            raise ValueError("correlation must lie in [-1, 1]")
        return dens


def synth_generate(c: SynthConfig) -> MultiplexGraph:
    """Target behavior from latent factors; auxiliaries mix the target support with noise.

    Each auxiliary entry copies the target entry with probability
    ``|correlation|`` and is independent Bernoulli noise otherwise. A negative
    correlation copies the complement restricted to the noise draw instead.
    """
    dens = c.densities()
    rng = np.random.default_rng(c.seed)
    M, N, K = c.n_users, c.n_items, c.n_behaviors
    U = rng.standard_normal((M, c.n_factors))
    V = rng.standard_normal((N, c.n_factors))
    w = np.exp(c.sharpness * (U @ V.T) / np.sqrt(c.n_factors))
    # scale so the clipped probabilities still average to the target density
    s = brentq(lambda a: np.minimum(a * w, 1.0).mean() - dens[-1], 0.0, 1.0 / w.min())
    p = np.minimum(s * w, 1.0)
    target = rng.random((M, N)) < p
    rho = abs(c.correlation)
    mats = []
    for k in range(K - 1):
        noise = rng.random((M, N)) < dens[k]
        copy = rng.random((M, N)) < rho
        src = target if c.correlation >= 0 else (noise & ~target)
        aux = np.where(copy, src, noise)
        mats.append(SparseMatrix.from_dense(aux.astype(float)))
    mats.append(SparseMatrix.from_dense(target.astype(float)))
    return MultiplexGraph(M, N, tuple(mats))


# label correlations -------------------------------------------------------


def label_cooccurrence(g: MultiplexGraph) -> dict[str, int]:
    """Count interacting pairs by their behavior-presence bit pattern.

    Bit ``k`` (left to right) is set when the pair is present in behavior ``k``.
    """
    K = g.n_behaviors
    keys = np.concatenate([m.row_indices * g.n_items + m.col_indices for m in g.interactions])
    bits = np.concatenate([np.full(m.nnz, 1 << (K - 1 - k), dtype=np.int64) for k, m in enumerate(g.interactions)])
    counts = {format(p, f"0{K}b"): 0 for p in range(1, 1 << K)}
    if not len(keys):
        return counts
    order = np.argsort(keys, kind="stable")
    keys, bits = keys[order], bits[order]
    starts = np.flatnonzero(np.r_[True, keys[1:] != keys[:-1]])
    codes = np.bitwise_or.reduceat(bits, starts)
    for code, n in zip(*np.unique(codes, return_counts=True)):
        counts[format(int(code), f"0{K}b")] = int(n)
    return counts
