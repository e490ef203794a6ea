"""Turns factor records into padded token batches for the model."""

from __future__ import annotations

import dataclasses

import numpy as np

from .encoders import PAD, Tokenizer
from .knowledge_bank import render_knowledge, textualize


@dataclasses.dataclass
class Batch:
    volumes: np.ndarray
    text_ids: np.ndarray
    knowledge_ids: np.ndarray
    labels: np.ndarray
    subject_ids: list

    def __len__(self):
        return len(self.labels)


def mask_record(record, schema, masked):
    """Copy of ``record`` with the named factors hidden from text and knowledge."""
    values = dict(record.non_imaging)
    for name in masked:
        values[name] = False if schema[name].channel == "knowledge" else None
    return dataclasses.replace(record, non_imaging=values)


class Featurizer:
    """Textualises records, renders their knowledge and tokenises both."""

    def __init__(self, schema, bank, tokenizer, cfg, text_len=None):
        self.schema = schema
        self.bank = bank
        self.tokenizer = tokenizer
        self.cfg = cfg
        self.text_len = text_len or cfg.max_text_len
        max_factors = cfg.max_text_len // cfg.knowledge_len
        self.knowledge_slots = min(len(schema), max_factors)

    @classmethod
    def fit(cls, schema, bank, records, cfg):
        """Build the vocabulary from ``records`` and the bank, and size text to the longest record."""
        texts = [textualize(r, schema) for r in records]
        texts += [e.render() for e in bank.entries.values()]
        tok = Tokenizer.build(texts, cfg.vocab_size)
        longest = max((len(tok.encode(textualize(r, schema))) for r in records), default=1)
        return cls(schema, bank, tok, cfg, text_len=min(max(longest, 1), cfg.max_text_len))

    def text_ids(self, record):
        return self.tokenizer.encode(textualize(record, self.schema), self.text_len)

    def knowledge_ids(self, record):
        """Per-factor knowledge tokens, each factor padded or cut to ``knowledge_len``."""
        present = self.schema.order(record.present_factors(self.schema))[: self.knowledge_slots]
        k = self.cfg.knowledge_len
        out = []
        for text in self.bank.render(present):
            ids = self.tokenizer.encode(text, k)
            out.extend(ids + [PAD] * (k - len(ids)))
        return out

    def knowledge_text(self, record):
        return render_knowledge(self.bank, record.present_factors(self.schema), self.schema)

    def batch(self, records):
        vols = np.stack([r.image_volume for r in records]).astype(np.float32)
        text = self.tokenizer.pad_batch([self.text_ids(r) for r in records], self.text_len)
        kn = [self.knowledge_ids(r) for r in records]
        width = max((len(x) for x in kn), default=0)
        know = self.tokenizer.pad_batch(kn, width)
        labels = np.array([r.label for r in records], dtype=np.int64)
        return Batch(vols, text, know, labels, [r.subject_id for r in records])

    def state(self):
        return {"vocab": list(self.tokenizer.vocab), "text_len": self.text_len}

    @classmethod
    def from_state(cls, state, schema, bank, cfg):
        return cls(schema, bank, Tokenizer(state["vocab"]), cfg, text_len=state["text_len"])
