"""Parameter containers and the transformer building blocks shared by every stack."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Owns parameters and sub-modules; yields them under stable dotted paths."""

    training = True

    def named_parameters(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad and id(val) not in seen:
                    seen.add(id(val))
                    yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".", seen)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.", seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self):
        return {k: p.data for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise nx.ShapeError(f"{k}: stored {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def param(rng, shape, fan_in, dtype):
    """Uniform init in +-1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def constant(value, shape, dtype):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, dtype=np.float32, bias=True):
        self.weight = param(rng, (d_in, d_out), d_in, dtype)
        self.bias = param(rng, (d_out,), d_in, dtype) if bias else None

    def __call__(self, x):
        y = nx.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        self.gain = constant(1.0, (d,), dtype)
        self.bias = zeros((d,), dtype)
        self.eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Two-layer position-wise MLP with a 4x hidden expansion."""

    def __init__(self, rng, d, hidden=None, dtype=np.float32):
        hidden = hidden or 4 * d
        self.fc1 = Linear(rng, d, hidden, dtype)
        self.fc2 = Linear(rng, hidden, d, dtype)

    def __call__(self, x):
        return self.fc2(nx.gelu(self.fc1(x)))


def split_heads(x, heads):
    b, n, d = x.shape
    return x.reshape(b, n, heads, d // heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dh)


def scaled_dot_attention(q, k, v, key_mask=None):
    """Attention over the last two axes of (..., Lq, dh) queries and (..., Lk, dh) keys.

    ``key_mask`` is a boolean array broadcastable to (..., 1, Lk); False marks
    padding. Returns the attended values and the weight matrix.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = nx.matmul(q, k.swapaxes(-1, -2)) * scale
    if key_mask is not None:
        scores = nx.masked_fill(scores, ~key_mask, -np.inf)
    weights = nx.softmax(scores, axis=-1)
    return nx.matmul(weights, v), weights


def expand_key_mask(mask):
    """(B, Lk) bool -> (B, 1, 1, Lk) for head-split attention."""
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    return mask[:, None, None, :]


class MultiHeadAttention(Module):
    """Standard multi-head attention with learned Q/K/V/O projections.

    ``memory_keys``/``memory_values`` of shape (heads, m, d_head) are treated as
    constants and prepended to every sample's projected keys and values.
    """

    def __init__(self, rng, d, heads, dtype=np.float32):
        if d % heads:
            raise ValueError(f"embed_dim {d} not divisible by heads {heads}")
        self.heads = heads
        self.q_proj = Linear(rng, d, d, dtype)
        self.k_proj = Linear(rng, d, d, dtype)
        self.v_proj = Linear(rng, d, d, dtype)
        self.o_proj = Linear(rng, d, d, dtype)
        self._last = {}

    def project_kv(self, kv):
        return split_heads(self.k_proj(kv), self.heads), split_heads(self.v_proj(kv), self.heads)

    def __call__(self, x, kv=None, key_mask=None, memory_keys=None, memory_values=None):
        kv = x if kv is None else kv
        q = split_heads(self.q_proj(x), self.heads)
        k, v = self.project_kv(kv)
        self._last = {"k": k, "v": v}
        mask = expand_key_mask(key_mask)
        if memory_keys is not None and memory_keys.shape[1] > 0:
            b = x.shape[0]
            mk = nx.Tensor(np.broadcast_to(memory_keys, (b,) + memory_keys.shape).astype(x.dtype))
            mv = nx.Tensor(np.broadcast_to(memory_values, (b,) + memory_values.shape).astype(x.dtype))
            k = nx.concat([mk, k], axis=2)
            v = nx.concat([mv, v], axis=2)
            if mask is not None:
                pad = np.ones(mask.shape[:-1] + (memory_keys.shape[1],), dtype=bool)
                mask = np.concatenate([pad, mask], axis=-1)
        out, weights = scaled_dot_attention(q, k, v, mask)
        self._last["weights"] = weights
        return self.o_proj(merge_heads(out))


class TransformerBlock(Module):
    """Post-norm block: LN(SA(x) + x) then LN(FFN(.) + .)."""

    def __init__(self, rng, d, heads, dtype=np.float32):
        self.attn = MultiHeadAttention(rng, d, heads, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ffn = FeedForward(rng, d, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype)

    def __call__(self, x, key_mask=None):
        h = self.ln1(self.attn(x, key_mask=key_mask) + x)
        return self.ln2(self.ffn(h) + h)
