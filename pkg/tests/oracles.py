"""Dense reference implementations used only by the tests.

Everything here works on full numpy matrices and plain loops so that it
shares no code path with the sparse/vectorized library.
"""

import itertools
import math

import numpy as np


def dense_interactions(g, k):
    out = np.zeros((g.n_users, g.n_items))
    m = g.interactions[k]
    for u in range(g.n_users):
        for i in m.col_indices[m.row_offsets[u] : m.row_offsets[u + 1]]:
            out[u, i] = 1.0
    return out


def dense_adjacency(g, k):
    Y = dense_interactions(g, k)
    M, N = Y.shape
    A = np.zeros((M + N, M + N))
    A[:M, M:] = Y
    A[M:, :M] = Y.T
    return A


def sym_norm(A):
    deg = A.sum(axis=1)
    inv = np.array([1 / math.sqrt(x) if x > 0 else 0.0 for x in deg])
    return inv[:, None] * A * inv[None, :]


def lrelu(z, slope):
    return np.where(z >= 0, z, slope * z)


def attention_tensors(params, variant, l, k, h):
    layerwise = variant in ("global", "node+layer", "node+behavior+layer")
    behwise = variant in ("global", "node+behavior", "node+behavior+layer")
    li = l - 2 if layerwise else 0
    ki = k if behwise else 0
    W = None if variant == "global" else params["att_W"][li, ki, h]
    return W, params["att_b"][li, ki, h]


def dense_forward(g, params, cfg):
    """K x (M+N) x d representations by explicit dense matrix products."""
    E0 = np.vstack([params["P"], params["Q"]])
    K, L, H = g.n_behaviors, cfg.n_layers, cfg.n_heads
    A = [sym_norm(dense_adjacency(g, j)) for j in range(K)]
    out = []
    for k in range(K):
        prev = E0
        total = E0.copy()
        for l in range(1, L + 1):
            msg = np.zeros_like(E0)
            heads_seq = list(itertools.product(range(H), repeat=l - 1)) if cfg.compress else [None]
            for heads in heads_seq:
                B = A[k].copy()
                for m in range(2, l + 1):
                    if not cfg.compress:
                        B = B @ A[k]
                        continue
                    W, b = attention_tensors(params, cfg.attention_variant, m, k, heads[m - 2])
                    pre = np.tile(b, (E0.shape[0], 1)) if W is None else E0 @ W.T + b
                    alpha = lrelu(pre, cfg.leaky_slope)
                    if cfg.scaling == "row":
                        C = sum(np.diag(alpha[:, j]) @ A[j] for j in range(K))
                    else:
                        C = sum(A[j] @ np.diag(alpha[:, j]) for j in range(K))
                    B = B @ C
                z = B @ E0
                if cfg.aggregator == "lightgcn":
                    msg += z
                elif cfg.aggregator == "lr-gccf":
                    msg += z @ params["agg_W"][l - 1]
                elif cfg.aggregator == "gcn":
                    msg += lrelu(z @ params["agg_W"][l - 1], cfg.leaky_slope)
                else:
                    pre = z @ params["agg_W"][l - 1] + (z * E0) @ params["agg_W2"][l - 1]
                    msg += lrelu(pre, cfg.leaky_slope)
            prev = msg + prev
            total = total + prev
        out.append(total)
    return np.stack(out)


def scalar_score(nodes, M, u, i, k, params, kind, frozen=None, shared_gate=False):
    """Score by explicit loops over embedding components."""
    K, _, d = nodes.shape
    xs = [nodes[j, u] for j in range(K)]
    ys = [nodes[j, M + i] for j in range(K)]
    if kind != "mesi":
        xb = sum(xs) / K
        yb = sum(ys) / K
        xs = [xb] * K
        ys = [yb] * K
    if kind == "bilinear":
        return sum(xs[0][c] * ys[0][c] * params["bil_r"][k][c] for c in range(d))
    if kind == "shared-bottom":
        T = params["sb_T"][k]
        f = [xs[0][c] * ys[0][c] for c in range(d)]
        return sum(sum(f[a] * T[a, b] for a in range(d)) for b in range(d)) / d
    if frozen is not None:
        g = list(frozen[k])
    else:
        gi = 0 if shared_gate else k
        W, b = params["gate_W"][gi], params["gate_b"][gi]
        inp = list(xs[k]) + list(ys[k])
        logits = [sum(W[j, c] * inp[c] for c in range(2 * d)) + b[j] for j in range(K)]
        mx = max(logits)
        ex = [math.exp(z - mx) for z in logits]
        g = [e / sum(ex) for e in ex]
    mix = [sum(g[j] * xs[j][c] * ys[j][c] for j in range(K)) for c in range(d)]
    return sum(mix) / d


def brute_pearson(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])
