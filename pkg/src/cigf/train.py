"""BPR training: triple sampling, loss, analytic gradients, Adam, and the fit loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import cigcn, mesi
from ._util import log_sigmoid_neg, sigmoid, xavier
from .cigcn import CigcnConfig
from .mbgraph import MultiplexGraph, SplitGraph
from .mesi import HeadConfig

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 256
    dim: int = 16
    reg: float = 0.0
    n_negatives: int = 1
    epochs: int = 50
    seed: int = 0
    dtype: str = "float64"
    task_weights: tuple[float, ...] | None = None
    # triples per behavior in the fixed batch whose loss is traced each epoch
    monitor_size: int = 512
    eval_every: int = 1

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.dim < 1 or self.n_negatives < 1 or self.epochs < 0:
            raise ValueError("learning rate, batch size, dim, negatives and epochs must be positive")
        if self.reg < 0:
            raise ValueError("reg must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


def init_model_params(
    g: MultiplexGraph, cfg: TrainConfig, cigcn_cfg: CigcnConfig, head: HeadConfig, seed: int | None = None
) -> dict:
    """Xavier-initialized embeddings plus CIGCN and head tensors."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dtype = np.dtype(cfg.dtype)
    d = cfg.dim
    params = {
        "P": xavier(rng, (g.n_users, d), g.n_users, d, dtype),
        "Q": xavier(rng, (g.n_items, d), g.n_items, d, dtype),
    }
    params.update(cigcn.init_params(rng, g.n_behaviors, d, cigcn_cfg, dtype))
    params.update(mesi.init_params(rng, g.n_behaviors, d, head, dtype))
    return params


# sampling ---------------------------------------------------------------


@dataclass
class TripleBatch:
    triples: dict[int, np.ndarray]  # behavior -> B x 3 array of (user, pos, neg)
    skipped: list[str] = field(default_factory=list)

    def __len__(self):
        return sum(len(t) for t in self.triples.values())

    def arrays(self):
        """Flattened ``users, pos, neg, tasks`` in sorted triple order."""
        if not len(self):
            e = np.zeros(0, dtype=np.int64)
            return e, e, e, e
        parts = [np.column_stack([np.full(len(t), k), t]) for k, t in sorted(self.triples.items()) if len(t)]
        a = np.concatenate(parts).astype(np.int64)
        a = a[np.lexsort(a.T[::-1])]
        return a[:, 1], a[:, 2], a[:, 3], a[:, 0]


def sample_triples(g: MultiplexGraph, batch_size: int, rng: np.random.Generator, n_negatives: int = 1) -> TripleBatch:
    """Uniform positives per behavior, each paired with ``n_negatives`` rejection-sampled negatives."""
    triples, skipped = {}, []
    for k, m in enumerate(g.interactions):
        if m.nnz == 0:
            skipped.append(f"behavior {k}: no positives")
            continue
        full = np.diff(m.row_offsets) >= g.n_items
        eligible = np.flatnonzero(~full[m.row_indices])
        if len(eligible) == 0:
            skipped.append(f"behavior {k}: no user has an unobserved item")
            continue
        if len(eligible) < m.nnz:
            log.warning("behavior %d: %d positives have no valid negative", k, m.nnz - len(eligible))
        pick = eligible[rng.integers(len(eligible), size=batch_size)]
        users = np.repeat(m.row_indices[pick], n_negatives)
        pos = np.repeat(m.col_indices[pick], n_negatives)
        neg = rng.integers(g.n_items, size=len(users))
        bad = g.has(k, users, neg)
        while bad.any():
            neg[bad] = rng.integers(g.n_items, size=int(bad.sum()))
            bad[bad] = g.has(k, users[bad], neg[bad])
        triples[k] = np.column_stack([users, pos, neg])
    for msg in skipped:
        log.warning(msg)
    return TripleBatch(triples, skipped)


# loss and gradients -----------------------------------------------------


def l2_penalty(params: dict) -> float:
    if not params:
        return 0.0
    return math.fsum(np.concatenate([np.ravel(v.astype(np.float64) ** 2) for v in params.values()]))


def bpr_loss(
    batch: TripleBatch,
    pos_scores: np.ndarray,
    neg_scores: np.ndarray,
    params: dict,
    reg: float,
    task_weights=None,
) -> float:
    """``sum softplus(-(s_pos - s_neg)) + reg * ||params||^2``.

    Scores are aligned with :meth:`TripleBatch.arrays`. The data term is
    summed with ``math.fsum`` so the result does not depend on triple order.
    """
    _, _, _, tasks = batch.arrays()
    w = np.ones(len(tasks)) if task_weights is None else np.asarray(task_weights, dtype=float)[tasks]
    terms = w * log_sigmoid_neg(np.asarray(pos_scores, dtype=float) - np.asarray(neg_scores, dtype=float))
    return math.fsum(terms) + reg * l2_penalty(params)


@dataclass
class Model:
    """The configuration pair needed to run forward and backward passes."""

    cigcn: CigcnConfig = field(default_factory=CigcnConfig)
    head: HeadConfig = field(default_factory=HeadConfig)


def forward(g: MultiplexGraph, params: dict, model: Model, batch: TripleBatch, caches: bool = False):
    users, pos, neg, tasks = batch.arrays()
    fcache = cigcn.ForwardCache() if caches else None
    reps = cigcn.propagate(g, params, model.cigcn, fcache)
    hcache = mesi.HeadCache(None, None, None, None, None) if caches else None
    s = mesi.score(reps, np.concatenate([users, users]), np.concatenate([pos, neg]), np.concatenate([tasks, tasks]),
                   params, model.head, hcache)
    B = len(users)
    return s[:B], s[B:], reps, fcache, hcache


def loss_and_grad(
    g: MultiplexGraph,
    params: dict,
    batch: TripleBatch,
    model: Model,
    reg: float,
    task_weights=None,
    need_grad: bool = True,
):
    pos_s, neg_s, reps, fcache, hcache = forward(g, params, model, batch, caches=need_grad)
    loss = bpr_loss(batch, pos_s, neg_s, params, reg, task_weights)
    if not need_grad:
        return loss, None
    _, _, _, tasks = batch.arrays()
    w = np.ones(len(tasks)) if task_weights is None else np.asarray(task_weights, dtype=float)[tasks]
    ddiff = -w * sigmoid(neg_s - pos_s)
    dscores = np.concatenate([ddiff, -ddiff]).astype(reps.nodes.dtype)
    grad_nodes, grads = mesi.score_backward(dscores, hcache, params, model.head, g.n_nodes, g.n_users)
    grads.update(cigcn.propagate_backward(grad_nodes, fcache, params, model.cigcn))
    for name, v in params.items():
        grads.setdefault(name, np.zeros_like(v))
        if reg:
            grads[name] = grads[name] + 2.0 * reg * v
    return loss, grads


def backward(g: MultiplexGraph, params: dict, batch: TripleBatch, model: Model, reg: float, task_weights=None) -> dict:
    return loss_and_grad(g, params, batch, model, reg, task_weights)[1]


def numerical_gradient(f, params: dict, eps: float = 1e-5, names=None) -> dict:
    """Central differences of the scalar ``f(params)`` for every entry."""
    out = {}
    for name in names or params:
        v = params[name]
        gnum = np.zeros_like(v, dtype=np.float64)
        flat = v.reshape(-1)
        for idx in range(flat.size):
            old = flat[idx]
            flat[idx] = old + eps
            fp = f(params)
            flat[idx] = old - eps
            fm = f(params)
            flat[idx] = old
            gnum.reshape(-1)[idx] = (fp - fm) / (2 * eps)
        out[name] = gnum
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-8) -> dict:
    errs = {}
    for name, fd in numeric.items():
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)
        errs[name] = float((np.abs(a - fd) / denom).max()) if a.size else 0.0
    return errs


# optimizer ----------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, applied in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return params


# fit ----------------------------------------------------------------------


@dataclass
class TraceRow:
    epoch: int
    loss: float
    hr10: float
    ndcg10: float
    seconds: float


@dataclass
class FitResult:
    params: dict
    trace: list[TraceRow]
    warnings: list[str] = field(default_factory=list)


def n_batches(g: MultiplexGraph, batch_size: int) -> int:
    return max(1, math.ceil(max(m.nnz for m in g.interactions) / batch_size))


def fit(split: SplitGraph, cfg: TrainConfig, head: HeadConfig, cigcn_cfg: CigcnConfig, params: dict | None = None,
        evaluate: bool = True) -> FitResult:
    """Train with Adam on BPR triples resampled every epoch.

    The traced loss is the objective on a fixed monitor batch drawn once
    from the seed, evaluated before training (epoch 0) and after each epoch.
    """
    from .analysis import evaluate as eval_split

    g = split.train
    model = Model(cigcn_cfg, head)
    params = init_model_params(g, cfg, cigcn_cfg, head) if params is None else params
    monitor = sample_triples(g, cfg.monitor_size, np.random.default_rng([cfg.seed, 2**31 - 1]), cfg.n_negatives)
    warnings = list(monitor.skipped)
    state = AdamState()

    def record(epoch: int, seconds: float) -> TraceRow:
        loss, _ = loss_and_grad(g, params, monitor, model, cfg.reg, cfg.task_weights, need_grad=False)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite monitor loss at epoch {epoch}")
        hr = nd = float("nan")
        if evaluate and split.test_positives and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            ev = eval_split(split, params, head, cigcn_cfg)
            hr, nd = ev.hr, ev.ndcg
        return TraceRow(epoch, loss, hr, nd, seconds)

    trace = [record(0, 0.0)]
    steps = n_batches(g, cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        t0 = time.perf_counter()
        for step in range(steps):
            batch = sample_triples(g, cfg.batch_size, rng, cfg.n_negatives)
            loss, grads = loss_and_grad(g, params, batch, model, cfg.reg, cfg.task_weights)
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            adam_step(params, grads, state, cfg.lr)
        seconds = time.perf_counter() - t0
        trace.append(record(epoch, seconds))
        log.info("epoch %d loss %.6f hr10 %.4f ndcg10 %.4f (%.2fs)", epoch, trace[-1].loss, trace[-1].hr10,
                 trace[-1].ndcg10, seconds)
    return FitResult(params, trace, warnings)
