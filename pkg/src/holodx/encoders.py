"""Unimodal encoders/decoders, the weight-shared knowledge encoder and EMA momentum twins."""

from __future__ import annotations

import copy
import re
from collections import Counter

import numpy as np

from . import numerics as nx
from .config import ConfigError
from .layers import Linear, Module, TransformerBlock, param

PAD, CLS, UNK, MASK = 0, 1, 2, 3
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[UNK]", "[MASK]")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def patchify_3d(volume, patch):
    """Split (..., S, S, S) volumes into ((S/p)^3, p^3) row-major cubes."""
    arr = volume.data if isinstance(volume, nx.Tensor) else np.asarray(volume)
    side = arr.shape[-1]
    if arr.shape[-3:] != (side, side, side):
        raise ConfigError(f"expected cubic volume, got {arr.shape}")
    if side % patch:
        raise ConfigError(f"volume side {side} not divisible by patch side {patch}")
    n = side // patch
    lead = arr.shape[:-3]
    k = len(lead)
    grid = arr.reshape(lead + (n, patch, n, patch, n, patch))
    order = tuple(range(k)) + tuple(k + i for i in (0, 2, 4, 1, 3, 5))
    out = grid.transpose(order).reshape(lead + (n ** 3, patch ** 3))
    return np.ascontiguousarray(out)


def unpatchify_3d(patches, patch):
    """Inverse of :func:`patchify_3d`; differentiable when given a Tensor."""
    is_t = isinstance(patches, nx.Tensor)
    shape = patches.shape
    n = round(shape[-2] ** (1 / 3))
    if n ** 3 != shape[-2] or shape[-1] != patch ** 3:
        raise ConfigError(f"cannot reassemble {shape} with patch side {patch}")
    lead = tuple(shape[:-2])
    k = len(lead)
    order = tuple(range(k)) + tuple(k + i for i in (0, 3, 1, 4, 2, 5))
    side = n * patch
    if is_t:
        x = patches.reshape(lead + (n, n, n, patch, patch, patch)).transpose(order)
        return x.reshape(lead + (side, side, side))
    x = np.asarray(patches).reshape(lead + (n, n, n, patch, patch, patch)).transpose(order)
    return np.ascontiguousarray(x.reshape(lead + (side, side, side)))


class Tokenizer:
    """Whitespace/punctuation splitter with a frequency-ranked vocabulary.

    Ids 0-3 are reserved for PAD, CLS, UNK and MASK.
    """

    def __init__(self, vocab):
        self.vocab = list(vocab)
        if tuple(self.vocab[:4]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the reserved tokens")
        self.index = {tok: i for i, tok in enumerate(self.vocab)}

    @staticmethod
    def split(text):
        return _TOKEN_RE.findall(text.lower())

    @classmethod
    def build(cls, texts, vocab_size):
        counts = Counter()
        for t in texts:
            counts.update(cls.split(t))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ranked[: vocab_size - len(SPECIAL_TOKENS)]]
        return cls(list(SPECIAL_TOKENS) + words)

    def __len__(self):
        return len(self.vocab)

    def encode(self, text, max_len=None):
        ids = [self.index.get(tok, UNK) for tok in self.split(text)]
        return ids[:max_len] if max_len is not None else ids

    def decode(self, ids):
        return " ".join(self.vocab[i] for i in ids if i != PAD)

    def pad_batch(self, seqs, length):
        out = np.full((len(seqs), length), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            s = s[:length]
            out[i, : len(s)] = s
        return out


class ImageEncoder(Module):
    """3D patch-embedding transformer; row 0 of the output is the image CLS feature."""

    def __init__(self, rng, cfg, dtype=np.float32):
        p3 = cfg.patch_side ** 3
        d = cfg.embed_dim
        self.patch_side = cfg.patch_side
        self.volume_side = cfg.volume_side
        self.patch_embed = Linear(rng, p3, d, dtype)
        self.cls = param(rng, (1, 1, d), d, dtype)
        self.pos = nx.Tensor(np.zeros((1, cfg.num_patches + 1, d), dtype=dtype), requires_grad=True)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, dtype) for _ in range(cfg.encoder_layers)]

    def embed(self, volumes):
        vols = np.asarray(volumes)
        if vols.ndim == 3:
            vols = vols[None]
        if vols.shape[1:] != (self.volume_side,) * 3:
            raise nx.ShapeError(f"volume shape {vols.shape[1:]} does not match side {self.volume_side}")
        patches = nx.Tensor(patchify_3d(vols, self.patch_side).astype(self.pos.dtype))
        x = self.patch_embed(patches)
        b = x.shape[0]
        cls = nx.Tensor(np.ones((b, 1, 1), dtype=x.dtype)) * self.cls
        return nx.concat([cls, x], axis=1) + self.pos

    def __call__(self, volumes):
        x = self.embed(volumes)
        for blk in self.blocks:
            x = blk(x)
        return x


class TextEncoder(Module):
    """Token transformer with a learned CLS prefix and padding-aware attention.

    Returns ``(H, mask)`` where ``mask`` flags real (non-pad) rows, CLS included.
    """

    def __init__(self, rng, cfg, dtype=np.float32):
        d = cfg.embed_dim
        self.vocab_size = cfg.vocab_size
        self.max_len = cfg.max_text_len
        self.token_embed = param(rng, (cfg.vocab_size, d), d, dtype)
        self.cls = param(rng, (1, 1, d), d, dtype)
        self.pos = nx.Tensor(np.zeros((1, cfg.max_text_len + 1, d), dtype=dtype), requires_grad=True)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, dtype) for _ in range(cfg.encoder_layers)]

    def __call__(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, n = ids.shape
        if n > self.max_len:
            raise nx.ShapeError(f"sequence of {n} tokens exceeds max_text_len {self.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id outside vocabulary of size {self.vocab_size}")
        x = nx.embedding(self.token_embed, ids)
        cls = nx.Tensor(np.ones((b, 1, 1), dtype=x.dtype)) * self.cls
        x = nx.concat([cls, x], axis=1) + self.pos[:, : n + 1]
        mask = np.concatenate([np.ones((b, 1), dtype=bool), ids != PAD], axis=1)
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        return x, mask


class KnowledgeEncoder(Module):
    """Encodes concatenated per-factor knowledge with the text encoder's own parameters."""

    def __init__(self, text_encoder):
        # deliberately stored under a private name: parameters belong to the text encoder
        self._text = text_encoder

    @property
    def text_encoder(self):
        return self._text

    def __call__(self, ids):
        return self._text(ids)


class ImageDecoder(Module):
    def __init__(self, rng, cfg, dtype=np.float32, layers=None):
        d = cfg.embed_dim
        n = cfg.decoder_layers if layers is None else layers
        self.patch_side = cfg.patch_side
        self.blocks = [TransformerBlock(rng, d, cfg.heads, dtype) for _ in range(n)]
        self.proj = Linear(rng, d, cfg.patch_side ** 3, dtype)

    def __call__(self, h):
        x = h
        for blk in self.blocks:
            x = blk(x)
        return unpatchify_3d(self.proj(x[:, 1:]), self.patch_side)


class TextDecoder(Module):
    """Parallel per-position vocabulary logits for every non-CLS position."""

    def __init__(self, rng, cfg, dtype=np.float32, layers=None):
        d = cfg.embed_dim
        n = cfg.decoder_layers if layers is None else layers
        self.blocks = [TransformerBlock(rng, d, cfg.heads, dtype) for _ in range(n)]
        self.proj = Linear(rng, d, cfg.vocab_size, dtype)

    def __call__(self, h, mask=None):
        x = h
        for blk in self.blocks:
            x = blk(x, key_mask=mask)
        return self.proj(x[:, 1:])


def all_tensors(module):
    """Every tensor owned by ``module`` (trainable or not), keyed by path."""
    out = {}
    seen = set()

    def walk(m, prefix):
        for key, val in vars(m).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(val, nx.Tensor):
                if id(val) not in seen:
                    seen.add(id(val))
                    out[path] = val
            elif isinstance(val, Module):
                walk(val, path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        walk(item, f"{path}.{i}.")

    walk(module, "")
    return out


class MomentumPair:
    """An online module and its gradient-free exponential-moving-average twin."""

    def __init__(self, online, coefficient=0.995):
        self.online = online
        self.coefficient = coefficient
        self.momentum = copy.deepcopy(online)
        for t in all_tensors(self.momentum).values():
            t.requires_grad = False
            t.grad = None

    def pairs(self):
        theta = all_tensors(self.online)
        xi = all_tensors(self.momentum)
        if theta.keys() != xi.keys():
            raise nx.ContractViolation("momentum twin diverged structurally from its online module")
        return [(xi[k], theta[k]) for k in theta]

    def ema_update(self):
        m = self.coefficient
        for xi, theta in self.pairs():
            if xi.shape != theta.shape:
                raise nx.ShapeError(f"momentum shape {xi.shape} vs online {theta.shape}")
            xi.data = (m * xi.data + (1.0 - m) * theta.data).astype(xi.dtype, copy=False)

    def __call__(self, *args, **kwargs):
        with nx.no_grad():
            return self.momentum(*args, **kwargs)


def ema_update(pair):
    pair.ema_update()
    return pair
