"""Knowledge injection: joint image-text self-attention followed by gated knowledge cross-attention."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention


def build_joint_sequence(h_image, h_text, image_mask=None, text_mask=None):
    """Concatenate image then text token rows; returns the joint sequence and its key mask."""
    if h_image.shape[-1] != h_text.shape[-1]:
        raise nx.ShapeError(f"embedding widths differ: image {h_image.shape} vs text {h_text.shape}")
    if h_image.shape[0] != h_text.shape[0]:
        raise nx.ShapeError(f"batch sizes differ: {h_image.shape[0]} vs {h_text.shape[0]}")
    b = h_image.shape[0]
    if image_mask is None:
        image_mask = np.ones((b, h_image.shape[1]), dtype=bool)
    if text_mask is None:
        text_mask = np.ones((b, h_text.shape[1]), dtype=bool)
    joint = nx.concat([h_image, h_text], axis=1)
    return joint, np.concatenate([image_mask, text_mask], axis=1)


class KnowledgeGate(Module):
    """Knowledge-aware gated cross-attention.

    Gate ``g = sigmoid(H W_g + b_g)`` is computed per token and channel; the
    output is ``LN(g * H + (1 - g) * CA(H, K, V))``. With ``gated=False`` the
    blend is the ungated sum ``LN(H + CA(H, K, V))`` used by the ablation.
    """

    def __init__(self, rng, d, heads, dtype=np.float32, gate_bias=2.0, gated=True):
        self.cross = MultiHeadAttention(rng, d, heads, dtype)
        self.gate = Linear(rng, d, d, dtype)
        self.gate.bias = nx.Tensor(np.full((d,), gate_bias, dtype=dtype), requires_grad=True)
        self.norm = LayerNorm(d, dtype)
        self.gated = gated
        self._trace = {}  # activations of the latest call, kept out of the parameter walk

    @property
    def last_gate(self):
        return self._trace.get("gate")

    @property
    def last_attention(self):
        return self._trace.get("attention")

    @property
    def last_pre_norm(self):
        return self._trace.get("pre_norm")

    def __call__(self, h, knowledge, knowledge_mask=None):
        if knowledge.shape[1] == 0:
            raise nx.ContractViolation("knowledge sequence is empty; at least one factor is required")
        attn = self.cross(h, kv=knowledge, key_mask=knowledge_mask)
        self._trace = {"attention": attn}
        if self.gated:
            g = nx.sigmoid(self.gate(h))
            self._trace["gate"] = g
            mixed = g * h + (1.0 - g) * attn
        else:
            mixed = h + attn
        self._trace["pre_norm"] = mixed
        return self.norm(mixed)


def kag(layer, h, knowledge, knowledge_mask=None):
    return layer(h, knowledge, knowledge_mask)


class KnowledgeLayer(Module):
    """SA + residual LN, then the knowledge gate, then FFN + residual LN.

    With ``use_knowledge=False`` the gate step is skipped (backbone-only ablation).
    """

    def __init__(self, rng, d, heads, dtype=np.float32, gate_bias=2.0, gated=True, use_knowledge=True):
        self.self_attn = MultiHeadAttention(rng, d, heads, dtype)
        self.ln_sa = LayerNorm(d, dtype)
        self.kag = KnowledgeGate(rng, d, heads, dtype, gate_bias, gated) if use_knowledge else None
        self.ffn = FeedForward(rng, d, dtype=dtype)
        self.ln_ffn = LayerNorm(d, dtype)

    def self_attention(self, q, mask=None):
        return self.ln_sa(self.self_attn(q, key_mask=mask) + q)

    def __call__(self, h, knowledge=None, joint_mask=None, knowledge_mask=None):
        h1 = self.self_attention(h, joint_mask)
        h2 = h1 if self.kag is None else self.kag(h1, knowledge, knowledge_mask)
        return self.ln_ffn(self.ffn(h2) + h2)


class KnowledgeInjection(Module):
    def __init__(self, rng, cfg, dtype=np.float32, gated=True, use_knowledge=True):
        self.layers = [
            KnowledgeLayer(rng, cfg.embed_dim, cfg.heads, dtype, cfg.gate_bias_init, gated, use_knowledge)
            for _ in range(cfg.kl_layers)
        ]

    def __call__(self, joint, knowledge=None, joint_mask=None, knowledge_mask=None):
        h = joint
        for layer in self.layers:
            h = layer(h, knowledge, joint_mask, knowledge_mask)
        return h


def fuse_cls(joint, image_len, h_knowledge=None):
    """Pick the image/text CLS rows from the injected joint sequence plus the knowledge CLS.

    Returns ``(h, seq)``: the (B, 3d) concatenation and the (B, 3, d) token
    sequence, ordered image, text, knowledge. Without knowledge both carry
    only the image and text components.
    """
    h_i = joint[:, 0:1]
    h_t = joint[:, image_len:image_len + 1]
    parts = [h_i, h_t]
    if h_knowledge is not None:
        parts.append(h_knowledge[:, 0:1])
    seq = nx.concat(parts, axis=1)
    b = seq.shape[0]
    return seq.reshape(b, -1), seq
