"""Shared fixtures for gradient and training checks."""

import numpy as np

from cigf import train
from cigf.cigcn import CigcnConfig
from cigf.mbgraph import SynthConfig, synth_generate
from cigf.mesi import HeadConfig

KINK = 1e-6


def central_difference(f, params, eps=1e-5):
    out = {}
    for name, v in params.items():
        g = np.zeros(v.shape)
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + eps
            fp = f()
            v[idx] = old - eps
            fm = f()
            v[idx] = old
            g[idx] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def rel_error(a, b, floor=1e-8):
    return float((np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)).max()) if a.size else 0.0


def gradient_instance(seed, kind="mesi", aggregator="lightgcn", variant="node+behavior+layer", H=1, L=2,
                      scaling="row", shared_gate=False, reg=0.01, M=6, N=5, K=3, d=4, scale=0.7):
    """A tiny random model plus batch, redrawn until no pre-activation sits near a LeakyReLU kink."""
    cc = CigcnConfig(n_layers=L, n_heads=H, aggregator=aggregator, attention_variant=variant, scaling=scaling)
    hc = HeadConfig(kind, shared_gate=shared_gate)
    model = train.Model(cc, hc)
    for attempt in range(100):
        s = seed * 1000 + attempt
        rng = np.random.default_rng(s)
        g = synth_generate(SynthConfig(M, N, K, density=(0.4,) * K, correlation=0.3, seed=s))
        p = train.init_model_params(g, train.TrainConfig(dim=d, seed=s), cc, hc)
        for name in p:
            p[name] = rng.normal(size=p[name].shape) * scale
        batch = train.sample_triples(g, 4, rng)
        *_, fcache, _ = train.forward(g, p, model, batch, caches=True)
        if fcache.min_abs_pre >= KINK:
            return g, p, batch, model, reg
    raise RuntimeError("could not draw a kink-free instance")


def check_gradients(seed, **kw):
    """Max relative error of analytic vs central-difference gradients, per tensor."""
    g, p, batch, model, reg = gradient_instance(seed, **kw)
    _, grads = train.loss_and_grad(g, p, batch, model, reg)
    num = central_difference(lambda: train.loss_and_grad(g, p, batch, model, reg, need_grad=False)[0], p)
    return {name: rel_error(grads[name], num[name]) for name in p}
