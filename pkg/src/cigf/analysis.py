"""Ranking metrics, behavior-correlation grouping and gradient-conflict reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cigcn, mesi
from ._util import sigmoid
from .cigcn import CigcnConfig, Representations
from .mbgraph import MultiplexGraph, SplitGraph
from .mesi import HeadConfig


@dataclass
class RankingResult:
    users: np.ndarray
    ranks: np.ndarray  # 1-based rank of the held-out item
    sizes: np.ndarray  # candidate set sizes

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if np.any(self.ranks < 1) or np.any(self.ranks > self.sizes):
            raise ValueError("ranks must lie in [1, candidate count]")

    def __len__(self):
        return len(self.ranks)

    def lines(self):
        yield "user,rank,candidates"
        for u, r, n in zip(self.users, self.ranks, self.sizes):
            yield f"{u},{r},{n}"


def _ranks(results) -> np.ndarray:
    ranks = results.ranks if isinstance(results, RankingResult) else np.asarray(results)
    if len(ranks) == 0:
        raise ValueError("no ranking results")
    return ranks


def hr_at_n(results, n: int = 10) -> float:
    return float(np.mean(_ranks(results) <= n))


def ndcg_at_n(results, n: int = 10) -> float:
    ranks = _ranks(results).astype(float)
    gains = np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gains.mean())


def rank_first(scores: np.ndarray, items: np.ndarray, tie_break: str = "index", rng=None) -> int:
    """Rank of candidate 0 among ``scores``.

    Ties go to the smaller item index, or are ordered by a uniform random
    permutation when ``tie_break="random"``.
    """
    s0 = scores[0]
    rest, rest_items = scores[1:], items[1:]
    ahead = int(np.sum(rest > s0))
    tied = rest == s0
    if tie_break == "index":
        ahead += int(np.sum(tied & (rest_items < items[0])))
    elif tie_break == "random":
        ahead += int(rng.integers(int(tied.sum()) + 1))
    else:
        raise ValueError(f"unknown tie break {tie_break!r}")
    return ahead + 1


@dataclass
class Evaluation:
    result: RankingResult
    hr: float
    ndcg: float


def evaluate(
    split: SplitGraph,
    params: dict,
    head: HeadConfig,
    cigcn_cfg: CigcnConfig,
    n: int = 10,
    tie_break: str = "index",
    seed: int = 0,
    reps: Representations | None = None,
) -> Evaluation:
    """Rank every held-out target item against its fixed candidates."""
    g = split.train
    if reps is None:
        reps = cigcn.propagate(g, params, cigcn_cfg)
    users = sorted(split.test_positives)
    cands = [split.candidates(u) for u in users]
    sizes = np.array([len(c) for c in cands])
    all_users = np.repeat(users, sizes)
    all_items = np.concatenate(cands) if cands else np.zeros(0, dtype=np.int64)
    scores = mesi.score(reps, all_users, all_items, g.target_index, params, head)
    rng = np.random.default_rng(seed)
    ranks = []
    start = 0
    for c, size in zip(cands, sizes):
        ranks.append(rank_first(scores[start : start + size], c, tie_break, rng))
        start += size
    res = RankingResult(users, ranks, sizes)
    if not len(res):
        return Evaluation(res, float("nan"), float("nan"))
    return Evaluation(res, hr_at_n(res, n), ndcg_at_n(res, n))


# behavior correlation -------------------------------------------------------


def pearson_user(g: MultiplexGraph, u: int, s: int, t: int) -> float | None:
    """Pearson correlation of user ``u``'s binary rows under behaviors ``s`` and ``t``.

    Returns ``None`` when either row is constant.
    """
    n = g.n_items
    a = g.interactions[s].row(u)[0]
    b = g.interactions[t].row(u)[0]
    na, nb = len(a), len(b)
    nab = len(np.intersect1d(a, b, assume_unique=True))
    var_a = na - na * na / n
    var_b = nb - nb * nb / n
    if var_a <= 0 or var_b <= 0:
        return None
    r = (nab - na * nb / n) / np.sqrt(var_a * var_b)
    return float(np.clip(r, -1.0, 1.0))


def avg_pearson(g: MultiplexGraph, u: int) -> float | None:
    """Mean of the defined pairwise correlations over behavior pairs ``s < t``."""
    K = g.n_behaviors
    vals = [pearson_user(g, u, s, t) for s in range(K) for t in range(s + 1, K)]
    vals = [v for v in vals if v is not None]
    if not vals:
        return None
    return float(sum(vals) / len(vals))


@dataclass
class UserGroup:
    lo: float
    hi: float
    users: list[int] = field(default_factory=list)


def group_users(
    g: MultiplexGraph,
    boundaries=None,
    n_groups: int = 6,
    users=None,
    min_degree: int | None = None,
) -> list[UserGroup]:
    """Bucket users by average Pearson correlation.

    Without ``boundaries`` the observed range is cut into ``n_groups`` equal
    widths. A value equal to a boundary falls in the upper bucket. Users with
    no defined correlation, or (with ``min_degree``) fewer total interactions,
    are left out.
    """
    users = range(g.n_users) if users is None else users
    deg = sum(np.diff(m.row_offsets) for m in g.interactions)
    scored = []
    for u in users:
        if min_degree is not None and deg[u] < min_degree:
            continue
        r = avg_pearson(g, u)
        if r is not None:
            scored.append((u, r))
    if boundaries is None:
        if not scored:
            return []
        rs = [r for _, r in scored]
        boundaries = list(np.linspace(min(rs), max(rs), n_groups + 1)[1:-1])
    boundaries = [float(b) for b in boundaries]
    if boundaries != sorted(boundaries):
        raise ValueError("boundaries must be sorted")
    edges = [-1.0] + boundaries + [1.0]
    groups = [UserGroup(edges[j], edges[j + 1]) for j in range(len(boundaries) + 1)]
    for u, r in scored:
        groups[int(np.searchsorted(boundaries, r, side="right"))].users.append(u)
    return groups


def subsample_interactions(g: MultiplexGraph, n: int, seed: int = 0, keep_users=None) -> MultiplexGraph:
    """Keep exactly ``n`` randomly chosen (item, behavior) interactions per user.

    Users with fewer than ``n`` interactions lose all of them. ``keep_users``
    maps a user to one ``(item, behavior)`` pair that must survive, e.g. a
    held-out target pair kept for evaluation.
    """
    from .mbgraph import from_triples

    rng = np.random.default_rng(seed)
    trip = np.concatenate(
        [np.column_stack([m.row_indices, m.col_indices, np.full(m.nnz, k)]) for k, m in enumerate(g.interactions)]
    )
    trip = trip[np.lexsort((trip[:, 2], trip[:, 1], trip[:, 0]))]
    keep_users = keep_users or {}
    out = []
    for u in range(g.n_users):
        rows = trip[trip[:, 0] == u]
        if len(rows) < n:
            continue
        forced = keep_users.get(u)
        if forced is not None:
            hit = np.flatnonzero((rows[:, 1] == forced[0]) & (rows[:, 2] == forced[1]))
            others = np.delete(rows, hit, axis=0)
            pick = others[rng.choice(len(others), size=n - len(hit), replace=False)]
            out.append(np.concatenate([rows[hit], pick]))
        else:
            out.append(rows[rng.choice(len(rows), size=n, replace=False)])
    trip = np.concatenate(out) if out else np.zeros((0, 3), dtype=np.int64)
    return from_triples(trip, g.n_users, g.n_items, g.n_behaviors, g.behavior_names)


def group_lines(groups: list[UserGroup], metrics: list[tuple[float, float]]):
    yield "group,lo,hi,count,hr10,ndcg10"
    for j, (grp, (hr, nd)) in enumerate(zip(groups, metrics)):
        yield f"{j},{grp.lo:.6f},{grp.hi:.6f},{len(grp.users)},{hr:.6f},{nd:.6f}"


# gradient conflict ----------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class ConflictReport:
    # per task, the gradient of its loss w.r.t. the input being updated
    vectors: list[np.ndarray]
    scalars: np.ndarray
    cosines: dict[tuple[int, int], float | None]
    # per task, (coefficient along the reference vector, norm of the orthogonal rest)
    projections: list[tuple[float, float]]
    # MESI only: blocks[k][t] = d loss_k / d (x_t, y_t)
    blocks: np.ndarray | None = None

    def lines(self):
        yield "pair,s,t,cosine"
        for j, ((s, t), c) in enumerate(sorted(self.cosines.items())):
            yield f"{j},{s},{t},{'' if c is None else f'{c:.12g}'}"


def _loss_derivative(loss: str, pred: float, label: float, neg_pred: float | None) -> float:
    if loss == "square":
        return 2.0 * (pred - label)
    if loss == "bpr":
        if neg_pred is None:
            raise ValueError("bpr conflict report needs a negative item")
        return -float(sigmoid(np.array(neg_pred - pred))) if label else 0.0
    raise ValueError(f"unknown loss kind {loss!r}")


def _pairwise(vectors) -> dict:
    K = len(vectors)
    return {(s, t): cosine(vectors[s], vectors[t]) for s in range(K) for t in range(s + 1, K)}


def _projections(vectors) -> list[tuple[float, float]]:
    ref = vectors[0]
    rr = float(ref @ ref)
    out = []
    for v in vectors:
        coef = float(v @ ref) / rr if rr > 0 else 0.0
        out.append((coef, float(np.linalg.norm(v - coef * ref))))
    return out


def conflict_report(
    head: HeadConfig,
    params: dict,
    reps: Representations,
    u: int,
    i: int,
    labels,
    loss: str = "square",
    neg_item: int | None = None,
) -> ConflictReport:
    """Per-task gradients for one (user, item) sample.

    Same-input heads: ``a_k * r_k``, the gradient of task ``k``'s loss with
    respect to the shared vector ``x * y``. MESI: the gradient of task
    ``k``'s loss with respect to every separate input pair, concatenated.
    """
    K = reps.n_behaviors
    labels = np.asarray(labels, dtype=float)
    preds = mesi.score(reps, [u] * K, [i] * K, np.arange(K), params, head)
    neg = mesi.score(reps, [u] * K, [neg_item] * K, np.arange(K), params, head) if neg_item is not None else None
    a = np.array([_loss_derivative(loss, preds[k], labels[k], None if neg is None else neg[k]) for k in range(K)])
    if head.kind in ("bilinear", "shared-bottom"):
        vectors = [a[k] * mesi.shared_input_direction(params, head, k) for k in range(K)]
        return ConflictReport(vectors, a, _pairwise(vectors), _projections(vectors))
    d = reps.nodes.shape[-1]
    n_nodes = reps.nodes.shape[1]
    blocks = np.zeros((K, K, 2 * d))
    for k in range(K):
        cache = mesi.HeadCache(None, None, None, None, None)
        mesi.score(reps, [u], [i], [k], params, head, cache)
        gn, _ = mesi.score_backward(np.array([a[k]]), cache, params, head, n_nodes, reps.n_users)
        for t in range(K):
            blocks[k, t] = np.concatenate([gn[t, u], gn[t, reps.n_users + i]])
    vectors = [blocks[k].ravel() for k in range(K)]
    return ConflictReport(vectors, a, _pairwise(vectors), _projections(vectors), blocks)
