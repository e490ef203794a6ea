"""Finite-difference audits of every layer type, in double precision."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .knowledge_injection import KnowledgeGate
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .memory_injection import ClassifierHead, MemLayer

LAYER_TYPES = ("SA", "CA", "KAG", "PMM", "FFN", "LN", "heads")

_D, _HEADS, _B, _L, _LK = 8, 2, 2, 3, 4


class _Heads(Module):
    """Classifier head plus a contrastive projection, scored together."""

    def __init__(self, rng, d, dtype):
        self.cls = ClassifierHead(rng, d, 2, dtype)
        self.proj = Linear(rng, d, 4, dtype)

    def __call__(self, seq, labels):
        ce = nx.softmax_cross_entropy(self.cls.logits(seq), labels)
        feat = nx.l2_normalize(self.proj(seq[:, 0]))
        return ce + (feat * feat[::-1]).sum()


def _build(kind, rng):
    f64 = np.float64
    x = nx.Tensor(rng.standard_normal((_B, _L, _D)), requires_grad=True)
    kv = nx.Tensor(rng.standard_normal((_B, _LK, _D)), requires_grad=True)
    mask = np.ones((_B, _LK), dtype=bool)
    mask[1, -1] = False  # exercise a padded key
    w = rng.standard_normal((_B, _L, _D))

    def weigh(y):
        return (y * nx.Tensor(w)).sum()

    if kind == "SA":
        layer = MultiHeadAttention(rng, _D, _HEADS, f64)
        return layer, (x,), lambda: weigh(layer(x))
    if kind == "CA":
        layer = MultiHeadAttention(rng, _D, _HEADS, f64)
        return layer, (x, kv), lambda: weigh(layer(x, kv=kv, key_mask=mask))
    if kind == "KAG":
        # a zero gate bias keeps both branches live
        layer = KnowledgeGate(rng, _D, _HEADS, f64, gate_bias=0.0)
        return layer, (x, kv), lambda: weigh(layer(x, kv, mask))
    if kind == "PMM":
        cfg = ModelConfig(embed_dim=_D, heads=_HEADS, prototypes=3, topk=2, dtype="float64")
        layer = MemLayer(rng, cfg, f64)
        dh = _D // _HEADS
        layer.memory.keys = rng.standard_normal((_HEADS, 3, dh))
        layer.memory.values = rng.standard_normal((_HEADS, 3, dh))
        return layer, (x,), lambda: weigh(layer(x))
    if kind == "FFN":
        layer = FeedForward(rng, _D, dtype=f64)
        return layer, (x,), lambda: weigh(layer(x))
    if kind == "LN":
        layer = LayerNorm(_D, f64)
        layer.gain.data = rng.uniform(0.5, 1.5, _D)
        layer.bias.data = rng.standard_normal(_D) * 0.1
        return layer, (x,), lambda: weigh(layer(x))
    if kind == "heads":
        layer = _Heads(rng, _D, f64)
        labels = np.array([0, 1])
        return layer, (x,), lambda: layer(x, labels)
    raise KeyError(kind)


def check_layer(kind, seed, tolerance=1e-4):
    """Run one finite-difference audit; returns a GradCheckReport over weights and inputs."""
    rng = np.random.default_rng(seed)
    layer, inputs, f = _build(kind, rng)
    params = dict(layer.named_parameters())
    for i, t in enumerate(inputs):
        params[f"input{i}"] = t
    return nx.finite_difference_check(f, params, tolerance=tolerance)


def check_all(seeds=range(10), kinds=LAYER_TYPES, tolerance=1e-4):
    """Mapping (kind, seed) -> report."""
    return {(k, s): check_layer(k, s, tolerance) for k in kinds for s in seeds}
