"""Prediction heads over the per-behavior representations.

``mesi`` gives every task its own gate, computed from that task's own
(user, item) representation pair, over K experts ``x_j * y_j``; the tower
is the mean over embedding components. ``bilinear`` and ``shared-bottom``
score a single shared input (the mean of the K representations), as does
``mesi-same-input``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._util import softmax, xavier
from .cigcn import Representations
from .sparse import DimensionError

HEAD_KINDS = ("mesi", "bilinear", "shared-bottom", "mesi-same-input")


class ConfigError(ValueError):
    """Head kind and parameter set do not match."""


@dataclass
class HeadConfig:
    kind: str = "mesi"
    # one gate for all tasks instead of one per task
    shared_gate: bool = False
    # optional K x K matrix; row k replaces the learned gate of task k
    frozen_gates: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}; expected one of {HEAD_KINDS}")

    @property
    def separate_input(self) -> bool:
        return self.kind == "mesi"

    @property
    def gated(self) -> bool:
        return self.kind in ("mesi", "mesi-same-input")


_REQUIRED = {
    "mesi": ("gate_W", "gate_b"),
    "mesi-same-input": ("gate_W", "gate_b"),
    "bilinear": ("bil_r",),
    "shared-bottom": ("sb_T",),
}


def init_params(rng: np.random.Generator, n_behaviors: int, dim: int, head: HeadConfig, dtype=np.float64) -> dict:
    K, d = n_behaviors, dim
    if head.gated:
        n_gates = 1 if head.shared_gate else K
        return {
            "gate_W": xavier(rng, (n_gates, K, 2 * d), 2 * d, K, dtype),
            "gate_b": np.zeros((n_gates, K), dtype=dtype),
        }
    if head.kind == "bilinear":
        return {"bil_r": xavier(rng, (K, d), 1, d, dtype)}
    return {"sb_T": xavier(rng, (K, d, d), d, d, dtype)}


def check_params(params: dict, head: HeadConfig) -> None:
    missing = [n for n in _REQUIRED[head.kind] if n not in params]
    if missing:
        raise ConfigError(f"head {head.kind!r} needs parameters {missing}")


# elementary pieces ---------------------------------------------------------


def expert(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape:
        raise DimensionError(f"expert inputs differ in shape: {x.shape} vs {y.shape}")
    return x * y


def gate(x: np.ndarray, y: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``softmax(W @ [x; y] + b)`` for one pair or a batch of pairs (rows)."""
    x, y = np.asarray(x), np.asarray(y)
    if x.shape != y.shape or W.shape[-1] != 2 * x.shape[-1]:
        raise DimensionError("gate input shapes do not agree")
    return softmax(np.concatenate([x, y], axis=-1) @ W.T + b)


# batched scoring -------------------------------------------------------------


@dataclass
class HeadCache:
    users: np.ndarray
    items: np.ndarray
    tasks: np.ndarray
    x: np.ndarray  # K x B x d, after same-input averaging if any
    y: np.ndarray
    gates: np.ndarray | None = None
    gate_in: np.ndarray | None = None


def _gate_index(head: HeadConfig, tasks: np.ndarray) -> np.ndarray:
    return np.zeros_like(tasks) if head.shared_gate else tasks


def score(
    reps: Representations,
    users,
    items,
    tasks,
    params: dict,
    head: HeadConfig,
    cache: HeadCache | None = None,
) -> np.ndarray:
    """Predicted scores for aligned arrays of users, items and task indices."""
    check_params(params, head)
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    tasks = np.broadcast_to(np.asarray(tasks, dtype=np.int64), users.shape)
    K = reps.n_behaviors
    if len(tasks) and (tasks.min() < 0 or tasks.max() >= K):
        raise IndexError("task index out of range")
    x = reps.nodes[:, users]
    y = reps.nodes[:, reps.n_users + items]
    if not head.separate_input:
        x = np.broadcast_to(x.mean(axis=0), x.shape)
        y = np.broadcast_to(y.mean(axis=0), y.shape)
    B = len(users)
    d = x.shape[-1]
    rows = np.arange(B)
    if cache is not None:
        cache.users, cache.items, cache.tasks, cache.x, cache.y = users, items, tasks, x, y
    if head.kind == "bilinear":
        return (x[0] * y[0] * params["bil_r"][tasks]).sum(axis=1)
    if head.kind == "shared-bottom":
        colmean = params["sb_T"][tasks].mean(axis=2)
        return (x[0] * y[0] * colmean).sum(axis=1)
    if head.frozen_gates is not None:
        g = np.asarray(head.frozen_gates, dtype=x.dtype)[tasks]
        gate_in = None
    else:
        gate_in = np.concatenate([x[tasks, rows], y[tasks, rows]], axis=1)
        gi = _gate_index(head, tasks)
        g = softmax(np.einsum("bkc,bc->bk", params["gate_W"][gi], gate_in) + params["gate_b"][gi])
    if cache is not None:
        cache.gates, cache.gate_in = g, gate_in
    mix = np.einsum("bk,kbd->bd", g, x * y)
    return mix.sum(axis=1) / d


def score_backward(dscores: np.ndarray, cache: HeadCache, params: dict, head: HeadConfig, n_nodes: int, n_users: int):
    """Gradients w.r.t. the representations (``K x n_nodes x d``) and head parameters."""
    c = np.asarray(dscores)
    x, y, tasks = cache.x, cache.y, cache.tasks
    K, B, d = x.shape
    rows = np.arange(B)
    grads = {n: np.zeros_like(params[n]) for n in _REQUIRED[head.kind]}
    dx = np.zeros((K, B, d), dtype=x.dtype)
    dy = np.zeros_like(dx)
    if head.kind == "bilinear":
        r = params["bil_r"][tasks]
        dx[0] = c[:, None] * y[0] * r
        dy[0] = c[:, None] * x[0] * r
        np.add.at(grads["bil_r"], tasks, c[:, None] * x[0] * y[0])
    elif head.kind == "shared-bottom":
        colmean = params["sb_T"][tasks].mean(axis=2)
        f = x[0] * y[0]
        dx[0] = c[:, None] * y[0] * colmean
        dy[0] = c[:, None] * x[0] * colmean
        np.add.at(grads["sb_T"], tasks, (c[:, None] * f)[:, :, None] * np.full(d, 1.0 / d))
    else:
        g = cache.gates
        F = x * y
        dF = g.T[:, :, None] * (c / d)[None, :, None]
        dx += dF * y
        dy += dF * x
        if cache.gate_in is not None:
            s = F.mean(axis=2).T  # B x K, d score / d gate
            dg = c[:, None] * s
            dz = g * (dg - (g * dg).sum(axis=1, keepdims=True))
            gi = _gate_index(head, tasks)
            np.add.at(grads["gate_W"], gi, dz[:, :, None] * cache.gate_in[:, None, :])
            np.add.at(grads["gate_b"], gi, dz)
            din = np.einsum("bkc,bk->bc", params["gate_W"][gi], dz)
            dx[tasks, rows] += din[:, :d]
            dy[tasks, rows] += din[:, d:]
    if not head.separate_input:
        # every slot held the mean of the K inputs
        if head.kind in ("bilinear", "shared-bottom"):
            dx = np.broadcast_to(dx[0] / K, dx.shape)
            dy = np.broadcast_to(dy[0] / K, dy.shape)
        else:
            dx = np.broadcast_to(dx.sum(axis=0) / K, dx.shape)
            dy = np.broadcast_to(dy.sum(axis=0) / K, dy.shape)
    grad_nodes = np.zeros((K, n_nodes, d), dtype=x.dtype)
    for k in range(K):
        np.add.at(grad_nodes[k], cache.users, dx[k])
        np.add.at(grad_nodes[k], n_users + cache.items, dy[k])
    return grad_nodes, grads


def predict(reps: Representations, u: int, i: int, k: int, params: dict, head: HeadConfig) -> float:
    return float(score(reps, [u], [i], [k], params, head)[0])


def shared_input_direction(params: dict, head: HeadConfig, k: int) -> np.ndarray:
    """``d score_k / d (x * y)`` for the same-input heads; constant in the input."""
    check_params(params, head)
    if head.kind == "bilinear":
        return params["bil_r"][k].copy()
    if head.kind == "shared-bottom":
        return params["sb_T"][k].mean(axis=1)
    raise ConfigError(f"head {head.kind!r} has no single shared input")


def gate_values(reps: Representations, users, items, k: int, params: dict, head: HeadConfig) -> np.ndarray:
    """Gate distributions of task ``k`` for each (user, item) pair, ``B x K``."""
    if not head.gated:
        raise ConfigError(f"head {head.kind!r} has no gates")
    cache = HeadCache(None, None, None, None, None)
    users = np.asarray(users, dtype=np.int64)
    score(reps, users, items, np.full(len(users), k), params, head, cache)
    return cache.gates


def expert_utilization(reps: Representations, params: dict, head: HeadConfig, users, items, k: int):
    """Mean gate of task ``k`` over the sample pairs, and the entropy of that mean."""
    if len(users) == 0:
        raise ValueError("expert utilization needs at least one sample")
    avg = gate_values(reps, users, items, k, params, head).mean(axis=0)
    nz = avg[avg > 0]
    return avg, float(-(nz * np.log(nz)).sum())
