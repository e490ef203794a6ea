"""The assembled diagnosis network: encoders, knowledge injection, memory injection and heads."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .encoders import (ImageDecoder, ImageEncoder, KnowledgeEncoder, MomentumPair, TextDecoder,
                       TextEncoder)
from .knowledge_injection import KnowledgeInjection, build_joint_sequence, fuse_cls
from .layers import Linear, Module
from .memory_injection import ClassifierHead, MemoryInjection


class HoloDx(Module):
    def __init__(self, cfg, seed=0, use_kag=True, use_memory=True, use_knowledge=True):
        cfg.validate()
        self.cfg = cfg
        self.use_knowledge = use_knowledge
        self.use_memory = use_memory
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        d, c = cfg.embed_dim, cfg.contrastive_dim
        self.image_encoder = ImageEncoder(rng, cfg, dtype)
        self.text_encoder = TextEncoder(rng, cfg, dtype)
        self.knowledge_encoder = KnowledgeEncoder(self.text_encoder) if use_knowledge else None
        self.image_decoder = ImageDecoder(rng, cfg, dtype)
        self.text_decoder = TextDecoder(rng, cfg, dtype)
        self.injection = KnowledgeInjection(rng, cfg, dtype, gated=use_kag, use_knowledge=use_knowledge)
        self.memory = MemoryInjection(rng, cfg, dtype) if use_memory else None
        self.head = ClassifierHead(rng, d, cfg.num_classes, dtype)
        self.image_proj = Linear(rng, d, c, dtype)
        self.text_proj = Linear(rng, d, c, dtype)
        self.data_proj = Linear(rng, 2 * d, c, dtype) if use_knowledge else None
        self.knowledge_proj = Linear(rng, d, c, dtype) if use_knowledge else None
        # momentum twins hold their own copies; underscore keeps them out of the trainable set
        m = cfg.momentum
        self._m_image = MomentumPair(self.image_encoder, m)
        self._m_text = MomentumPair(self.text_encoder, m)
        self._m_heads = [MomentumPair(p, m) for p in
                         (self.image_proj, self.text_proj, self.data_proj, self.knowledge_proj) if p is not None]
        self.null_text_path = False  # test hook: text and knowledge contribute nothing

    # -- pieces ------------------------------------------------------------------
    @property
    def momentum_pairs(self):
        return [self._m_image, self._m_text] + self._m_heads

    def ema_update(self):
        for pair in self.momentum_pairs:
            pair.ema_update()

    def encode_image(self, volumes):
        return self.image_encoder(volumes)

    def encode_text(self, ids):
        return self.text_encoder(ids)

    def encode_knowledge(self, ids):
        if self.knowledge_encoder is None:
            raise RuntimeError("model was built without the knowledge path")
        return self.knowledge_encoder(ids)

    def _null(self, b, dtype):
        return nx.Tensor(np.zeros((b, 1, self.cfg.embed_dim), dtype=dtype)), np.ones((b, 1), dtype=bool)

    def forward(self, batch, record_step=None, aux=True, image_states=None):
        """Run the network on a :class:`~holodx.data.Batch`.

        ``record_step`` pushes memory keys/values into the banks under that id.
        ``aux`` adds reconstruction and contrastive outputs. ``image_states``
        reuses a precomputed image encoding (broadcast over the batch).
        """
        b = len(batch)
        h_img = self.encode_image(batch.volumes) if image_states is None else image_states
        if h_img.shape[0] != b:
            h_img = nx.Tensor(np.broadcast_to(h_img.data, (b,) + h_img.shape[1:]).copy())
        if self.null_text_path:
            h_txt, txt_mask = self._null(b, h_img.dtype)
        else:
            h_txt, txt_mask = self.encode_text(batch.text_ids)
        h_know = know_mask = None
        if self.use_knowledge:
            if self.null_text_path:
                h_know, know_mask = self._null(b, h_img.dtype)
            else:
                h_know, know_mask = self.encode_knowledge(batch.knowledge_ids)

        joint, joint_mask = build_joint_sequence(h_img, h_txt, None, txt_mask)
        injected = self.injection(joint, h_know, joint_mask, know_mask)
        h, seq = fuse_cls(injected, h_img.shape[1], h_know)
        if self.memory is not None:
            seq = self.memory(seq, record_step)
        logits = self.head.logits(seq)
        out = {"logits": logits, "probs": nx.softmax(logits, axis=-1), "fused": h}
        if not aux:
            return out

        out["recon"] = self.image_decoder(h_img)
        out["text_logits"] = self.text_decoder(h_txt, txt_mask)
        cls_i, cls_t = h_img[:, 0], h_txt[:, 0]
        out["image_feat"] = nx.l2_normalize(self.image_proj(cls_i))
        out["text_feat"] = nx.l2_normalize(self.text_proj(cls_t))
        if self.use_knowledge:
            out["data_feat"] = nx.l2_normalize(self.data_proj(nx.concat([cls_i, cls_t], axis=-1)))
            out["knowledge_feat"] = nx.l2_normalize(self.knowledge_proj(h_know[:, 0]))
        return out

    __call__ = forward

    def momentum_features(self, batch):
        """Contrastive features from the EMA twins; never recorded on a tape."""
        with nx.no_grad():
            ci = self._m_image(batch.volumes)[:, 0]
            ct = self._m_text(batch.text_ids)[0][:, 0]
            heads = [p.momentum for p in self._m_heads]
            out = {"image_feat": nx.l2_normalize(heads[0](ci)), "text_feat": nx.l2_normalize(heads[1](ct))}
            if self.use_knowledge:
                ck = self._m_text(batch.knowledge_ids)[0][:, 0]
                out["data_feat"] = nx.l2_normalize(heads[2](nx.concat([ci, ct], axis=-1)))
                out["knowledge_feat"] = nx.l2_normalize(heads[3](ck))
        return out

    def momentum_state(self):
        """Momentum tensors keyed by stable path."""
        from .encoders import all_tensors

        names = ["image_encoder", "text_encoder", "image_proj", "text_proj", "data_proj", "knowledge_proj"]
        names = [n for n in names if getattr(self, n) is not None]
        out = {}
        for name, pair in zip(names, self.momentum_pairs):
            for k, t in all_tensors(pair.momentum).items():
                out[f"{name}.{k}"] = t
        return out

    def predict_proba(self, batch, image_states=None):
        with nx.no_grad():
            return self.forward(batch, aux=False, image_states=image_states)["probs"].data
