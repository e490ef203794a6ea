"""Optimiser, training loop and evaluation."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import Featurizer
from .metrics import compute_metrics
from .model import HoloDx
from .objectives import (LOSS_TERMS, FeatureQueue, classification_loss_from_logits, itc_loss, kdc_loss,
                         restoration_losses, total_loss)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "batch") + LOSS_TERMS + ("total", "grad_norm")


class NumericFailure(RuntimeError):
    """The loss became non-finite."""


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = dict(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k] = b1 * self.m[k] + (1 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            data = p.data
            if self.weight_decay and data.ndim >= 2:
                data = data * (1.0 - self.lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (data - self.lr * update).astype(p.dtype, copy=False)


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.dtype, copy=False)
    return total


def _finite(x):
    return x is None or math.isfinite(float(x.data))


class Trainer:
    """Owns the model, optimiser, queues and counters for one training run."""

    def __init__(self, run_cfg: RunConfig, schema, bank, train_records, featurizer=None, log_path=None):
        self.cfg = run_cfg.validate()
        tc, mc = run_cfg.train, run_cfg.model
        self.schema = schema
        self.bank = bank
        self.train_records = list(train_records)
        self.featurizer = featurizer or Featurizer.fit(schema, bank, self.train_records, mc)
        self.model = HoloDx(mc, seed=tc.seed, use_kag=tc.use_kag, use_memory=tc.use_memory,
                            use_knowledge=tc.use_knowledge)
        self.opt = AdamW(self.model.named_parameters(), tc.lr, tc.betas, tc.adam_eps, tc.weight_decay)
        dtype = np.dtype(mc.dtype)
        self.queues = {name: FeatureQueue(mc.contrastive_dim, tc.queue_size, dtype)
                       for name in ("image", "text", "data", "knowledge")}
        self.step_count = 0
        self.epoch = 0
        self.batch_index = 0
        self.history = []
        self.log_path = log_path
        if log_path:
            with open(log_path, "w", encoding="utf-8") as fh:
                fh.write("\t".join(LOG_COLUMNS) + "\n")

    # -- schedule ------------------------------------------------------------------
    @property
    def batches_per_epoch(self):
        return math.ceil(len(self.train_records) / self.cfg.train.batch_size)

    def epoch_order(self, epoch):
        return np.random.default_rng([self.cfg.train.seed, epoch]).permutation(len(self.train_records))

    def _batch(self, epoch, bi):
        bs = self.cfg.train.batch_size
        idx = self.epoch_order(epoch)[bi * bs:(bi + 1) * bs]
        return self.featurizer.batch([self.train_records[i] for i in idx])

    # -- one step ------------------------------------------------------------------
    def loss_parts(self, out, batch):
        tc, w = self.cfg.train, self.cfg.loss
        skip = set(tc.loss_mask)
        parts = {}
        q = self.queues
        if "itc" not in skip:
            parts["itc"] = itc_loss(out["image_feat"], out["text_feat"], w.temperature,
                                    q["image"] if tc.itc_queue else None,
                                    q["text"] if tc.itc_queue else None)
        if "kdc" not in skip and tc.use_kdc and self.model.use_knowledge:
            parts["kdc"] = kdc_loss(out["data_feat"], out["knowledge_feat"], w.temperature,
                                    q["data"], q["knowledge"])
        if "res_i" not in skip or "res_t" not in skip:
            res_i, res_t = restoration_losses(batch.volumes, out["recon"], batch.text_ids, out["text_logits"])
            if "res_i" not in skip:
                parts["res_i"] = res_i
            if "res_t" not in skip:
                parts["res_t"] = res_t
        if "cls" not in skip:
            parts["cls"] = classification_loss_from_logits(out["logits"], batch.labels)
        return parts

    def train_step(self, batch, epoch=None, batch_index=None):
        model = self.model
        model.train()
        epoch = self.epoch if epoch is None else epoch
        batch_index = self.batch_index if batch_index is None else batch_index
        if model.memory is not None:
            model.memory.refresh(epoch, batch_index, self.batches_per_epoch,
                                 seed=self.cfg.train.seed * 1000003 + self.step_count)
        out = model.forward(batch, record_step=self.step_count)
        parts = self.loss_parts(out, batch)
        total = total_loss(parts, self.cfg.loss)
        if not all(_finite(p) for p in parts.values()) or not _finite(total):
            raise NumericFailure(f"non-finite loss at step {self.step_count}")
        model.zero_grad()
        params = list(self.opt.params.values())
        nx.backward(total, leaves=params)
        grad_norm = clip_grad_norm(params, self.cfg.train.grad_clip)
        if not math.isfinite(grad_norm):
            raise NumericFailure(f"non-finite gradient at step {self.step_count}")
        self.opt.step()
        model.ema_update()
        mom = model.momentum_features(batch)
        self.queues["image"].enqueue(mom["image_feat"], "momentum")
        self.queues["text"].enqueue(mom["text_feat"], "momentum")
        if model.use_knowledge:
            self.queues["data"].enqueue(mom["data_feat"], "momentum")
            self.queues["knowledge"].enqueue(mom["knowledge_feat"], "momentum")
        row = {"step": self.step_count, "epoch": epoch, "batch": batch_index}
        for k in LOSS_TERMS:
            row[k] = float(parts[k].data) if k in parts else None
        row["total"] = float(total.data)
        row["grad_norm"] = grad_norm
        self.history.append(row)
        self._log(row)
        self.step_count += 1
        return row

    def _log(self, row):
        if not self.log_path or self.step_count % max(self.cfg.train.log_every, 1):
            return
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write("\t".join("NA" if row[c] is None else (f"{row[c]:.8g}" if isinstance(row[c], float) else str(row[c]))
                               for c in LOG_COLUMNS) + "\n")

    # -- loops -------------------------------------------------------------------
    def fit(self, epochs=None, max_steps=None, on_epoch_end=None, stop=None):
        """Train until ``epochs`` complete or ``max_steps`` further steps have run.

        ``stop(trainer)`` returning True ends training after the current step.
        """
        epochs = self.cfg.train.epochs if epochs is None else epochs
        budget = max_steps if max_steps is not None else (self.cfg.train.max_steps or None)
        done = 0
        while self.epoch < epochs:
            nb = self.batches_per_epoch
            while self.batch_index < nb:
                if budget is not None and done >= budget:
                    return self.history
                self.train_step(self._batch(self.epoch, self.batch_index))
                self.batch_index += 1
                done += 1
                if stop is not None and stop(self):
                    if self.batch_index >= nb:
                        self.epoch += 1
                        self.batch_index = 0
                    return self.history
            self.epoch += 1
            self.batch_index = 0
            if on_epoch_end is not None:
                on_epoch_end(self)
        return self.history

    def predict(self, records, batch_size=32):
        self.model.eval()
        probs = []
        for start in range(0, len(records), batch_size):
            probs.append(self.model.predict_proba(self.featurizer.batch(records[start:start + batch_size])))
        self.model.train()
        return np.concatenate(probs) if probs else np.zeros((0, self.cfg.model.num_classes))

    def evaluate(self, records):
        if not records:
            raise ValueError("evaluation split is empty")
        probs = self.predict(records)
        labels = np.array([r.label for r in records])
        return compute_metrics(probs[:, 1], labels)
