"""Compressed interaction graph convolution.

For every start behavior ``k`` the layer-``l`` messages come from chains
``A^k @ C^2 @ ... @ C^l`` applied to the initial node embeddings, where each
``C^m`` is a node-wise attention mixture of the K normalized behavior
adjacencies. With ``H`` heads there are ``H**(l-1)`` chains at layer ``l``
instead of the ``K**(l-1)`` products of the uncompressed interaction set.
Chains are always evaluated as nested sparse products; no high-order
adjacency is ever formed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import sparse
from ._util import leaky_relu, leaky_relu_grad, xavier
from .mbgraph import MultiplexGraph
from .sparse import SparseMatrix

AGGREGATORS = ("lightgcn", "gcn", "ngcf", "lr-gccf")
ATTENTION_VARIANTS = ("global", "node", "node+layer", "node+behavior", "node+behavior+layer")

DEFAULT_LETTERS = {3: "VCP", 4: "VFCP"}


@dataclass
class CigcnConfig:
    n_layers: int = 2
    n_heads: int = 1
    aggregator: str = "lightgcn"
    leaky_slope: float = 0.2
    attention_variant: str = "node+behavior+layer"
    # False drops graph compression: layer l propagates over A^k l times ("w/o CIGCN")
    compress: bool = True
    # which side of each behavior adjacency the attention scales
    scaling: Literal["row", "column"] = "row"
    normalization: str = "symmetric"

    def __post_init__(self):
        self.aggregator = self.aggregator.lower()
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}; expected one of {AGGREGATORS}")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {self.attention_variant!r}")
        if self.n_layers < 0 or self.n_heads < 1:
            raise ValueError("n_layers must be >= 0 and n_heads >= 1")
        if self.scaling not in ("row", "column"):
            raise ValueError(f"unknown scaling {self.scaling!r}")


@dataclass
class Representations:
    """Per start behavior final node vectors, shape ``K x (M+N) x d``."""

    nodes: np.ndarray
    n_users: int

    @property
    def n_behaviors(self) -> int:
        return self.nodes.shape[0]

    def users(self, k: int) -> np.ndarray:
        return self.nodes[k, : self.n_users]

    def items(self, k: int) -> np.ndarray:
        return self.nodes[k, self.n_users :]


@dataclass
class Chain:
    """A matrix chain plus the attention head that produced each mixed link."""

    mats: tuple[SparseMatrix, ...]
    heads: tuple[int, ...] = ()


# parameters ---------------------------------------------------------------


def _att_slots(config: CigcnConfig, n_behaviors: int) -> tuple[int, int]:
    v = config.attention_variant
    n_mixed = max(config.n_layers - 1, 0)
    layer_slots = n_mixed if v in ("global", "node+layer", "node+behavior+layer") else 1
    beh_slots = n_behaviors if v in ("global", "node+behavior", "node+behavior+layer") else 1
    return layer_slots, beh_slots


def att_slot(config: CigcnConfig, l: int, k: int) -> tuple[int, int]:
    """Index into the attention tensors for layer ``l`` (>= 2) and start behavior ``k``."""
    v = config.attention_variant
    li = l - 2 if v in ("global", "node+layer", "node+behavior+layer") else 0
    ki = k if v in ("global", "node+behavior", "node+behavior+layer") else 0
    return li, ki


def init_params(rng: np.random.Generator, n_behaviors: int, dim: int, config: CigcnConfig, dtype=np.float64) -> dict:
    """Attention and aggregator tensors (embeddings are owned by the trainer)."""
    K, d, H = n_behaviors, dim, config.n_heads
    params = {}
    if config.compress and config.n_layers >= 2:
        sl, sk = _att_slots(config, K)
        if config.attention_variant != "global":
            params["att_W"] = xavier(rng, (sl, sk, H, K, d), d, K, dtype)
        params["att_b"] = np.zeros((sl, sk, H, K), dtype=dtype)
    if config.aggregator in ("gcn", "ngcf", "lr-gccf"):
        params["agg_W"] = xavier(rng, (config.n_layers, d, d), d, d, dtype)
    if config.aggregator == "ngcf":
        params["agg_W2"] = xavier(rng, (config.n_layers, d, d), d, d, dtype)
    return params


# attention ----------------------------------------------------------------


def _attention_pre(x: np.ndarray, l: int, k: int, h: int, params: dict, config: CigcnConfig) -> np.ndarray:
    li, ki = att_slot(config, l, k)
    b = params["att_b"][li, ki, h]
    if config.attention_variant == "global":
        return np.broadcast_to(b, x.shape[:-1] + b.shape).copy()
    return x @ params["att_W"][li, ki, h].T + b


def attention_weights(x: np.ndarray, l: int, k: int, h: int, params: dict, config: CigcnConfig) -> np.ndarray:
    """LeakyReLU attention over the K behaviors for node embedding(s) ``x``.

    ``x`` may be a single ``d`` vector or an ``n x d`` matrix. ``l`` counts
    from 2, the first layer that mixes behaviors.
    """
    if l < 2 or l > config.n_layers:
        raise IndexError(f"attention exists for layers 2..{config.n_layers}, got {l}")
    return leaky_relu(_attention_pre(np.asarray(x), l, k, h, params, config), config.leaky_slope)


def interaction_set_size(n_behaviors: int, n_heads: int, l: int, compressed: bool = True) -> int:
    if l < 1:
        raise ValueError("order must be >= 1")
    return (n_heads if compressed else n_behaviors) ** (l - 1)


def enumerate_interaction_set(adjs: list[SparseMatrix], k: int, l: int) -> list[Chain]:
    """The uncompressed order-``l`` set starting at ``k``: every behavior at every step."""
    chains = [Chain((adjs[k],))]
    for _ in range(l - 1):
        chains = [Chain(c.mats + (a,), c.heads + (j,)) for c in chains for j, a in enumerate(adjs)]
    return chains


def compress(adjs: list[SparseMatrix], alpha: np.ndarray, scaling: str = "row", layout=None) -> SparseMatrix:
    """``sum_j diag(alpha[:, j]) @ adjs[j]`` (or ``adjs[j] @ diag(alpha[:, j])`` for column scaling).

    With a precomputed :class:`~cigf.sparse.UnionLayout` of ``adjs`` the sum is
    a single scatter; otherwise it folds :func:`~cigf.sparse.sparse_add`.
    """
    if layout is not None:
        return layout.combine(alpha, None) if scaling == "row" else layout.combine(None, alpha)
    scale = sparse.row_scale if scaling == "row" else sparse.col_scale
    out = scale(adjs[0], alpha[:, 0])
    for j in range(1, len(adjs)):
        out = sparse.sparse_add(out, scale(adjs[j], alpha[:, j]))
    return out


def compressed_step(
    prev_chains: list[Chain],
    l: int,
    k: int,
    node_embeddings: np.ndarray,
    adjs: list[SparseMatrix],
    params: dict,
    config: CigcnConfig,
    layout=None,
) -> list[Chain]:
    """Extend every order-``(l-1)`` chain by one attention-mixed matrix per head."""
    mixed = []
    for h in range(config.n_heads):
        alpha = attention_weights(node_embeddings, l, k, h, params, config)
        mixed.append(compress(adjs, alpha, config.scaling, layout))
    return [Chain(c.mats + (mixed[h],), c.heads + (h,)) for c in prev_chains for h in range(config.n_heads)]


# forward / backward -------------------------------------------------------


@dataclass
class _ChainCache:
    chain: Chain
    inputs: list[np.ndarray]  # inputs[m] is the vector multiplied by chain.mats[m]
    z: np.ndarray
    pre: np.ndarray | None = None
    inter: np.ndarray | None = None


@dataclass
class ForwardCache:
    E0: np.ndarray | None = None
    adjs: list[SparseMatrix] | None = None
    chains: dict = field(default_factory=dict)  # (k, l) -> list[_ChainCache]
    att_pre: dict = field(default_factory=dict)  # (l, k, h) -> n x K
    min_abs_pre: float = np.inf


def _adjacencies(g: MultiplexGraph, config: CigcnConfig, dtype):
    """Normalized behavior adjacencies in ``dtype`` and their union layout, cached on the graph."""
    key = ("cigcn-adj", config.normalization, np.dtype(dtype).str)
    if key not in g._cache:
        adjs = [g.normalized_adjacency(j, config.normalization).astype(dtype) for j in range(g.n_behaviors)]
        g._cache[key] = (adjs, sparse.UnionLayout(adjs))
    return g._cache[key]


def _aggregate(z: np.ndarray, E0: np.ndarray, l: int, params: dict, config: CigcnConfig, rec: _ChainCache):
    agg = config.aggregator
    if agg == "lightgcn":
        return z
    W = params["agg_W"][l - 1]
    if agg == "lr-gccf":
        return z @ W
    pre = z @ W
    if agg == "ngcf":
        rec.inter = z * E0
        pre = pre + rec.inter @ params["agg_W2"][l - 1]
    rec.pre = pre
    return leaky_relu(pre, config.leaky_slope)


def propagate(
    g: MultiplexGraph,
    params: dict,
    config: CigcnConfig,
    cache: ForwardCache | None = None,
) -> Representations:
    """Run the K start-behavior propagations and return the summed layer outputs.

    ``params`` must hold the user table ``P`` and item table ``Q`` besides
    the tensors from :func:`init_params`. Passing a :class:`ForwardCache`
    records what :func:`propagate_backward` needs.
    """
    E0 = np.concatenate([params["P"], params["Q"]], axis=0)
    K, L = g.n_behaviors, config.n_layers
    adjs, layout = _adjacencies(g, config, E0.dtype)
    if cache is not None:
        cache.E0, cache.adjs = E0, adjs
    out = np.empty((K,) + E0.shape, dtype=E0.dtype)
    for k in range(K):
        x_prev = E0
        total = E0.copy()
        chains = [Chain((adjs[k],))]
        for l in range(1, L + 1):
            if l >= 2:
                if config.compress:
                    chains = compressed_step(chains, l, k, E0, adjs, params, config, layout)
                    if cache is not None:
                        for h in range(config.n_heads):
                            pre = _attention_pre(E0, l, k, h, params, config)
                            cache.att_pre[(l, k, h)] = pre
                            cache.min_abs_pre = min(cache.min_abs_pre, float(np.abs(pre).min()))
                else:
                    chains = [Chain(c.mats + (adjs[k],), c.heads) for c in chains]
            msg = np.zeros_like(E0)
            recs = []
            for c in chains:
                inputs = [None] * len(c.mats)
                v = E0
                for m in range(len(c.mats) - 1, -1, -1):
                    inputs[m] = v
                    v = sparse.matvec(c.mats[m], v)
                rec = _ChainCache(c, inputs, v)
                msg += _aggregate(v, E0, l, params, config, rec)
                if rec.pre is not None and cache is not None:
                    cache.min_abs_pre = min(cache.min_abs_pre, float(np.abs(rec.pre).min()))
                recs.append(rec)
            if cache is not None:
                cache.chains[(k, l)] = recs
            x_prev = msg + x_prev
            total += x_prev
        out[k] = total
    return Representations(out, g.n_users)


def propagate_backward(grad_nodes: np.ndarray, cache: ForwardCache, params: dict, config: CigcnConfig) -> dict:
    """Gradients of a scalar loss given ``d loss / d Representations.nodes``.

    Returns gradients for ``P``, ``Q`` and every tensor of :func:`init_params`.
    """
    E0, adjs = cache.E0, cache.adjs
    K = grad_nodes.shape[0]
    L = config.n_layers
    slope = config.leaky_slope
    grads = {n: np.zeros_like(v) for n, v in params.items() if n.startswith(("att_", "agg_"))}
    dE0 = np.zeros_like(E0)
    d_alpha: dict = {}
    for k in range(K):
        G = grad_nodes[k]
        dE0 += (L + 1) * G
        for l in range(1, L + 1):
            dmsg = (L - l + 1) * G
            for rec in cache.chains[(k, l)]:
                dz = _aggregate_backward(dmsg, rec, E0, l, params, config, grads, dE0)
                gcur = dz
                mats = rec.chain.mats
                for m in range(len(mats)):
                    if m >= 1 and config.compress:
                        key = (m + 1, k, rec.chain.heads[m - 1])
                        da = d_alpha.setdefault(key, np.zeros((E0.shape[0], K), dtype=E0.dtype))
                        u = rec.inputs[m]
                        for j in range(K):
                            if config.scaling == "row":
                                da[:, j] += np.einsum("nd,nd->n", gcur, sparse.matvec(adjs[j], u))
                            else:
                                da[:, j] += np.einsum("nd,nd->n", u, sparse.rmatvec(adjs[j], gcur))
                    gcur = sparse.rmatvec(mats[m], gcur)
                dE0 += gcur
    for (l, k, h), da in d_alpha.items():
        pre = cache.att_pre[(l, k, h)]
        dpre = da * leaky_relu_grad(pre, slope)
        li, ki = att_slot(config, l, k)
        grads["att_b"][li, ki, h] += dpre.sum(axis=0)
        if config.attention_variant != "global":
            grads["att_W"][li, ki, h] += dpre.T @ E0
            dE0 += dpre @ params["att_W"][li, ki, h]
    M = params["P"].shape[0]
    grads["P"] = dE0[:M]
    grads["Q"] = dE0[M:]
    return grads


def _aggregate_backward(dm, rec: _ChainCache, E0, l, params, config, grads, dE0):
    agg = config.aggregator
    if agg == "lightgcn":
        return dm
    W = params["agg_W"][l - 1]
    if agg == "lr-gccf":
        grads["agg_W"][l - 1] += rec.z.T @ dm
        return dm @ W.T
    dpre = dm * leaky_relu_grad(rec.pre, config.leaky_slope)
    grads["agg_W"][l - 1] += rec.z.T @ dpre
    dz = dpre @ W.T
    if agg == "ngcf":
        W2 = params["agg_W2"][l - 1]
        grads["agg_W2"][l - 1] += rec.inter.T @ dpre
        dinter = dpre @ W2.T
        dz = dz + dinter * E0
        dE0 += dinter * rec.z
    return dz


# reporting ----------------------------------------------------------------


def behavior_letters(g: MultiplexGraph) -> str:
    if g.behavior_names is not None:
        return "".join(n[0].upper() for n in g.behavior_names)
    K = g.n_behaviors
    return DEFAULT_LETTERS.get(K, "ABCDEFGHIJKLMNOPQRSTUVWXYZ"[:K])


def attention_report(g: MultiplexGraph, params: dict, config: CigcnConfig, top: int = 3, letters: str | None = None):
    """Rank behavior sequences of each order by their mean user attention.

    A relation ``k j_2 ... j_l`` starts at behavior ``k`` and picks ``j_m`` at
    layer ``m``; its score is the product over layers of the attention that
    start behavior ``k`` gives to ``j_m``, averaged over all users and heads.
    Ties are broken by the relation string. Returns ``(order, relation,
    score, rank)`` tuples for the ``top`` best and ``top`` worst of each order.
    """
    if not config.compress:
        raise ValueError("attention report needs graph compression enabled")
    K = g.n_behaviors
    letters = letters or behavior_letters(g)
    users = params["P"]
    avg = {}
    for l in range(2, config.n_layers + 1):
        for k in range(K):
            a = [attention_weights(users, l, k, h, params, config).mean(axis=0) for h in range(config.n_heads)]
            avg[(l, k)] = np.mean(a, axis=0)
    rows = []
    for order in range(1, config.n_layers + 1):
        scored = []
        for seq in itertools.product(range(K), repeat=order):
            score = 1.0
            for m, j in enumerate(seq[1:], start=2):
                score *= float(avg[(m, seq[0])][j])
            scored.append(("".join(letters[j] for j in seq), score))
        scored.sort(key=lambda t: (-t[1], t[0]))
        n = len(scored)
        picked = sorted(set(range(min(top, n))) | set(range(max(n - top, 0), n)))
        rows.extend((order, scored[r][0], scored[r][1], r + 1) for r in picked)
    return rows
