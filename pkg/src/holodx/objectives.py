"""Training objectives: contrastive alignment with momentum queues, restoration, classification."""

from __future__ import annotations

import logging

import numpy as np

from . import numerics as nx
from .encoders import PAD

log = logging.getLogger(__name__)

LOSS_TERMS = ("itc", "kdc", "res_i", "res_t", "cls")


class FeatureQueue:
    """Fixed-capacity FIFO ring of unit-normalised feature rows written by momentum encoders."""

    def __init__(self, dim, capacity=1024, dtype=np.float32):
        self.dim = dim
        self.capacity = capacity
        self.rows = np.zeros((capacity, dim), dtype=dtype)
        self.count = 0
        self.cursor = 0

    def __len__(self):
        return min(self.count, self.capacity)

    def contents(self):
        return self.rows[: len(self)]

    def enqueue(self, feats, source):
        if source != "momentum":
            raise nx.ContractViolation(f"queues accept momentum-encoder features only, got source={source!r}")
        if isinstance(feats, nx.Tensor):
            if feats.requires_grad:
                raise nx.ContractViolation("queue input is attached to a gradient tape")
            feats = feats.data
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise nx.ShapeError(f"queue expects (n, {self.dim}) rows, got {feats.shape}")
        norm = np.linalg.norm(feats, axis=1, keepdims=True)
        feats = (feats / np.maximum(norm, 1e-12)).astype(self.rows.dtype)
        for row in feats:
            self.rows[self.cursor] = row
            self.cursor = (self.cursor + 1) % self.capacity
            self.count += 1
        return self


def queue_update(queue, momentum_feats, source="momentum"):
    return queue.enqueue(momentum_feats, source)


def _queue_tensor(queue, dtype):
    if queue is None or len(queue) == 0:
        return None
    return nx.Tensor(queue.contents().astype(dtype, copy=False))


def info_nce(anchors, positives, temperature, negatives=None):
    """Cross-entropy of each anchor picking its own positive among batch items and queued negatives."""
    n = anchors.shape[0]
    candidates = positives if negatives is None else nx.concat([positives, negatives], axis=0)
    logits = nx.matmul(anchors, candidates.T) * (1.0 / temperature)
    return nx.softmax_cross_entropy(logits, np.arange(n))


def symmetric_info_nce(a, b, temperature, queue_a=None, queue_b=None):
    """Mean of a->b and b->a InfoNCE; a->b draws extra negatives from ``queue_b`` and vice versa."""
    if a.shape != b.shape:
        raise nx.ShapeError(f"paired features differ in shape: {a.shape} vs {b.shape}")
    qa = _queue_tensor(queue_a, a.dtype)
    qb = _queue_tensor(queue_b, b.dtype)
    if a.shape[0] < 2 and qa is None and qb is None:
        raise nx.ContractViolation("contrastive loss undefined for a single pair without queued negatives")
    return 0.5 * (info_nce(a, b, temperature, qb) + info_nce(b, a, temperature, qa))


def itc_loss(image_feats, text_feats, temperature=0.07, image_queue=None, text_queue=None):
    return symmetric_info_nce(image_feats, text_feats, temperature, image_queue, text_queue)


def kdc_loss(data_feats, knowledge_feats, temperature=0.07, data_queue=None, knowledge_queue=None):
    return symmetric_info_nce(data_feats, knowledge_feats, temperature, data_queue, knowledge_queue)


def restoration_losses(volumes, recon, text_ids, text_logits):
    """Voxel MSE and mean token cross-entropy over non-pad positions."""
    vol = nx.Tensor(np.asarray(volumes, dtype=recon.dtype))
    if vol.shape != recon.shape:
        raise nx.ShapeError(f"reconstruction {recon.shape} vs original {vol.shape}")
    loss_i = nx.mse(recon, vol)
    ids = np.asarray(text_ids)
    if text_logits.shape[:-1] != ids.shape:
        raise nx.ShapeError(f"text logits {text_logits.shape} vs ids {ids.shape}")
    scored = ids != PAD
    if not scored.any():
        log.info("text restoration: no non-pad tokens, loss set to 0")
    loss_t = nx.softmax_cross_entropy(text_logits, ids, weights=scored)
    return loss_i, loss_t


def classification_loss(probs, labels):
    """Mean negative log-likelihood of the true class under probability rows."""
    return nx.cross_entropy(probs, labels)


def classification_loss_from_logits(logits, labels):
    return nx.softmax_cross_entropy(logits, labels)


def total_loss(parts, weights):
    """Weighted sum: align*(itc + kdc) + restore*(res_i + res_t) + cls*cls.

    Absent terms are left out of their group; a group with no terms contributes nothing.
    """

    def group(names):
        acc = None
        for n in names:
            if n in parts and parts[n] is not None:
                acc = parts[n] if acc is None else acc + parts[n]
        return acc

    total = None
    for lam, names in ((weights.align, ("itc", "kdc")),
                       (weights.restore, ("res_i", "res_t")),
                       (weights.cls, ("cls",))):
        g = group(names)
        if g is None:
            continue
        term = g * lam
        total = term if total is None else total + term
    if total is None:
        return nx.Tensor(np.zeros(()))
    return total
