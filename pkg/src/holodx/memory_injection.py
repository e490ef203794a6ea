"""Prototypical memory: sliding key/value banks, K-Means key prototypes and memory attention."""

from __future__ import annotations

import logging
from collections import deque

import numpy as np

from . import numerics as nx
from .config import ConfigError
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention, scaled_dot_attention

log = logging.getLogger(__name__)


class MemoryBank:
    """Keys and values of the last ``capacity`` mini-batches, newest first.

    Each entry stores per-head arrays of shape (heads, n_i, d_head).
    """

    def __init__(self, capacity=100):
        if capacity < 1:
            raise ConfigError("memory window must hold at least one batch")
        self.capacity = capacity
        self.entries = deque(maxlen=capacity)
        self._head_shape = None

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e[0] for e in self.entries]

    def push(self, keys, values, batch_id):
        keys = np.array(keys, copy=True)
        values = np.array(values, copy=True)
        if keys.ndim != 3 or keys.shape != values.shape:
            raise nx.ContractViolation(f"bank entries need matching (heads, n, d_head) keys/values, got {keys.shape} / {values.shape}")
        head_shape = (keys.shape[0], keys.shape[2])
        if self._head_shape is not None and head_shape != self._head_shape:
            raise nx.ContractViolation(f"bank entry shape drifted from {self._head_shape} to {head_shape}")
        self._head_shape = head_shape
        self.entries.appendleft((batch_id, keys, values))
        return self

    def keys(self):
        return np.concatenate([e[1] for e in self.entries], axis=1)

    def values(self):
        return np.concatenate([e[2] for e in self.entries], axis=1)

    @property
    def population(self):
        return sum(e[1].shape[1] for e in self.entries)

    def state(self):
        return [(bid, k, v) for bid, k, v in self.entries]

    def load_state(self, entries):
        self.entries.clear()
        self._head_shape = None
        for bid, k, v in reversed(list(entries)):
            self.push(k, v, bid)


def bank_push(bank, keys, values, t):
    return bank.push(keys, values, t)


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_objective(x, centroids):
    return float(_sq_dists(x, centroids).min(axis=1).sum())


def _kmeanspp(x, m, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def _lloyd(x, centers, max_iter, tol):
    prev = None
    for _ in range(max_iter):
        dist = _sq_dists(x, centers)
        assign = dist.argmin(axis=1)
        obj = float(dist[np.arange(len(x)), assign].sum())
        counts = np.bincount(assign, minlength=len(centers))
        new = np.zeros_like(centers)
        np.add.at(new, assign, x)
        nonempty = counts > 0
        new[nonempty] /= counts[nonempty, None]
        taken = set()
        for j in np.flatnonzero(~nonempty):
            # re-seed at the point farthest from its own centroid
            own = dist[np.arange(len(x)), assign].copy()
            if taken:
                own[list(taken)] = -1.0
            far = int(own.argmax())
            taken.add(far)
            new[j] = x[far]
        centers = new
        if prev is not None and abs(prev - obj) <= tol * max(prev, 1e-300):
            break
        prev = obj
    return centers


def kmeans(x, m, seed=0, restarts=10, max_iter=50, tol=1e-6):
    """Best-of-``restarts`` Lloyd clustering with k-means++ seeding.

    Returns ``(centroids, objective)`` where the objective is the summed
    squared distance of every point to its nearest centroid.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ConfigError("kmeans needs a non-empty (n, d) array")
    if m < 1 or m > len(x):
        raise ConfigError(f"cannot form {m} clusters from {len(x)} points")
    rng = np.random.default_rng(seed)
    best, best_obj = None, np.inf
    for _ in range(restarts):
        centers = _lloyd(x, _kmeanspp(x, m, rng), max_iter, tol)
        obj = kmeans_objective(x, centers)
        if obj < best_obj:
            best, best_obj = centers, obj
    return best, best_obj


def kmeans_prototypes(bank_keys, m, seed=0, **kw):
    return kmeans(bank_keys, m, seed, **kw)[0]


def value_prototypes(proto_keys, keys, values, k=8, normalize=False):
    """Sum the ``k`` nearest banked values of each key prototype, weighted by exp(-distance).

    Distances are Euclidean; ties go to the lower storage index. With
    ``normalize`` the weights are divided by their sum.
    """
    proto_keys = np.asarray(proto_keys, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n = len(keys)
    if k > n:
        log.warning("top-k of %d exceeds bank population %d; clamping", k, n)
        k = n
    # direct differences: the expanded form loses precision when a prototype sits on a key
    dist = np.linalg.norm(proto_keys[:, None, :] - keys[None, :, :], axis=-1)
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    d_k = np.take_along_axis(dist, order, axis=1)
    w = np.exp(-d_k)
    if normalize:
        w = w / w.sum(axis=1, keepdims=True)
    return np.einsum("mk,mkd->md", w, values[order])


class PrototypeMemory:
    """Per-head key/value prototypes rebuilt from a bank snapshot."""

    def __init__(self, m=16, k=8, normalize=False):
        self.m = m
        self.k = k
        self.normalize = normalize
        self.keys = None
        self.values = None
        self.epoch = None
        self.batch_index = None
        self.rebuilds = 0

    @property
    def ready(self):
        return self.keys is not None

    def rebuild(self, bank, seed, epoch=None, batch_index=None):
        bk, bv = bank.keys(), bank.values()
        if self.m == 0:
            self.keys = np.zeros(bk.shape[:1] + (0,) + bk.shape[2:])
            self.values = np.zeros(bv.shape[:1] + (0,) + bv.shape[2:])
            self.epoch, self.batch_index = epoch, batch_index
            self.rebuilds += 1
            return
        mk, mv = [], []
        for h in range(bk.shape[0]):
            centers = kmeans_prototypes(bk[h], self.m, seed=seed + 7919 * h)
            mk.append(centers)
            mv.append(value_prototypes(centers, bk[h], bv[h], self.k, self.normalize))
        self.keys = np.stack(mk)
        self.values = np.stack(mv)
        self.epoch, self.batch_index = epoch, batch_index
        self.rebuilds += 1


def refresh_points(batches_per_epoch):
    return sorted({0, batches_per_epoch // 2})


def refresh(memory, bank, epoch, batch_idx, batches_per_epoch, seed=0):
    """Rebuild prototypes at the start and midpoint of each epoch.

    Returns True when a rebuild happened; skipped (with a warning) while the
    bank is empty or holds fewer keys than prototypes.
    """
    if batch_idx not in refresh_points(batches_per_epoch):
        return False
    if len(bank) == 0 or bank.population < memory.m:
        log.warning("prototype refresh at epoch %d batch %d skipped: bank holds %d keys",
                    epoch, batch_idx, bank.population if len(bank) else 0)
        return False
    memory.rebuild(bank, seed, epoch, batch_idx)
    return True


def pmm_attention(q, k, v, proto_keys=None, proto_values=None, key_mask=None):
    """Attention of (B, h, Lq, dh) queries over prototype-prefixed keys and values.

    Prototypes have shape (h, m, dh) and enter as constants.
    """
    if proto_keys is not None and proto_keys.shape[1] > 0:
        if proto_keys.shape[-1] != k.shape[-1]:
            raise nx.ShapeError(f"prototype head width {proto_keys.shape[-1]} vs key width {k.shape[-1]}")
        b = q.shape[0]
        mk = nx.Tensor(np.broadcast_to(proto_keys, (b,) + proto_keys.shape).astype(q.dtype))
        mv = nx.Tensor(np.broadcast_to(proto_values, (b,) + proto_values.shape).astype(q.dtype))
        k = nx.concat([mk, k], axis=2)
        v = nx.concat([mv, v], axis=2)
        if key_mask is not None:
            pad = np.ones(key_mask.shape[:-1] + (proto_keys.shape[1],), dtype=bool)
            key_mask = np.concatenate([pad, key_mask], axis=-1)
    return scaled_dot_attention(q, k, v, key_mask)


class MemLayer(Module):
    """LN(PMM(x) + x) then LN(FFN(.) + .), with its own bank and prototypes."""

    def __init__(self, rng, cfg, dtype=np.float32):
        d = cfg.embed_dim
        self.attn = MultiHeadAttention(rng, d, cfg.heads, dtype)
        self.ln1 = LayerNorm(d, dtype)
        self.ffn = FeedForward(rng, d, dtype=dtype)
        self.ln2 = LayerNorm(d, dtype)
        self._bank = MemoryBank(cfg.memory_window)
        self._memory = PrototypeMemory(cfg.prototypes, cfg.topk, cfg.pmm_normalize)

    @property
    def bank(self):
        return self._bank

    @property
    def memory(self):
        return self._memory

    def __call__(self, h, record_step=None):
        mem = self._memory
        mk = mem.keys if mem.ready else None
        mv = mem.values if mem.ready else None
        a = self.attn(h, memory_keys=mk, memory_values=mv)
        if record_step is not None:
            k, v = self.attn._last["k"].data, self.attn._last["v"].data
            heads = k.shape[1]
            self._bank.push(k.transpose(1, 0, 2, 3).reshape(heads, -1, k.shape[-1]),
                            v.transpose(1, 0, 2, 3).reshape(heads, -1, v.shape[-1]), record_step)
        h1 = self.ln1(a + h)
        return self.ln2(self.ffn(h1) + h1)


class MemoryInjection(Module):
    def __init__(self, rng, cfg, dtype=np.float32):
        self.layers = [MemLayer(rng, cfg, dtype) for _ in range(cfg.mem_layers)]

    def __call__(self, seq, record_step=None):
        h = seq
        for layer in self.layers:
            h = layer(h, record_step)
        return h

    def refresh(self, epoch, batch_idx, batches_per_epoch, seed=0):
        done = False
        for i, layer in enumerate(self.layers):
            done |= refresh(layer.memory, layer.bank, epoch, batch_idx, batches_per_epoch,
                            seed=seed + 104729 * i)
        return done


class ClassifierHead(Module):
    """Mean-pool tokens, then Linear-ReLU-Linear to class logits."""

    def __init__(self, rng, d, num_classes, dtype=np.float32):
        self.fc1 = Linear(rng, d, d, dtype)
        self.fc2 = Linear(rng, d, num_classes, dtype)

    def logits(self, seq):
        pooled = seq.mean(axis=1)
        return self.fc2(nx.relu(self.fc1(pooled)))

    def __call__(self, seq):
        return nx.softmax(self.logits(seq), axis=-1)


def classify(head, seq):
    return head(seq)
