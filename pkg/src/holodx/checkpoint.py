"""Binary checkpoints: a JSON header followed by raw little-endian tensors.

Layout::

    8 bytes   magic  b"HDXCKPT\\0"
    4 bytes   format version (uint32, little-endian)
    8 bytes   header length in bytes (uint64, little-endian)
    N bytes   UTF-8 JSON header (sorted keys, no whitespace)
    ...       tensor payload, records back to back in header order

Each header record is ``{"path", "shape", "dtype", "offset", "nbytes"}``;
``dtype`` is ``"<f4"`` for 32-bit models (``"<f8"`` only for arrays that are
float64 in memory, e.g. double-precision test models).
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .config import RunConfig
from .data import Featurizer

MAGIC = b"HDXCKPT\0"
FORMAT_VERSION = 1


class CheckpointVersionError(ValueError):
    pass


def _dtype_tag(arr):
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise TypeError(f"unsupported checkpoint dtype {arr.dtype}")


def write_checkpoint(path, header, arrays):
    records, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        raw = arr.astype(tag, copy=False).tobytes(order="C")
        records.append({"path": name, "shape": list(arr.shape), "dtype": tag,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    head = dict(header)
    head["records"] = records
    text = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Return ``(header, arrays)`` with arrays keyed by record path, in file order."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"checkpoint format {version} is not readable by version {FORMAT_VERSION}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for rec in header["records"]:
        buf = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(buf, dtype=rec["dtype"]).reshape(rec["shape"])
        arrays[rec["path"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return header, arrays


def trainer_state(trainer):
    """Header and named arrays that fully describe a trainer's resumable state."""
    model = trainer.model
    arrays = {}
    for k, p in model.named_parameters():
        arrays[f"param/{k}"] = p.data
    for k, t in model.momentum_state().items():
        arrays[f"momentum/{k}"] = t.data
    for k in trainer.opt.params:
        arrays[f"optim.m/{k}"] = trainer.opt.m[k]
        arrays[f"optim.v/{k}"] = trainer.opt.v[k]
    memory = {}
    if model.memory is not None:
        for i, layer in enumerate(model.memory.layers):
            mem = layer.memory
            info = {"ready": mem.ready, "epoch": mem.epoch, "batch_index": mem.batch_index,
                    "rebuilds": mem.rebuilds, "bank_ids": layer.bank.ids}
            if mem.ready:
                arrays[f"prototype/{i}/keys"] = mem.keys
                arrays[f"prototype/{i}/values"] = mem.values
            for j, (bid, k, v) in enumerate(layer.bank.state()):
                arrays[f"bank/{i}/{j}/keys"] = k
                arrays[f"bank/{i}/{j}/values"] = v
            memory[str(i)] = info
    queues = {}
    for name, q in trainer.queues.items():
        arrays[f"queue/{name}"] = q.rows
        queues[name] = {"count": q.count, "cursor": q.cursor}
    header = {
        "format_version": FORMAT_VERSION,
        "config": trainer.cfg.to_dict(),
        "featurizer": trainer.featurizer.state(),
        "counters": {"step": trainer.step_count, "epoch": trainer.epoch, "batch_index": trainer.batch_index,
                     "optim_t": trainer.opt.t},
        "memory": memory,
        "queues": queues,
    }
    return header, arrays


def save_checkpoint(trainer, path):
    header, arrays = trainer_state(trainer)
    write_checkpoint(path, header, arrays)


def load_checkpoint(path, schema, bank, train_records=()):
    """Rebuild a :class:`~holodx.train.Trainer` from ``path``."""
    from .train import Trainer

    header, arrays = read_checkpoint(path)
    cfg = RunConfig.from_dict(header["config"])
    feat = Featurizer.from_state(header["featurizer"], schema, bank, cfg.model)
    trainer = Trainer(cfg, schema, bank, train_records, featurizer=feat)
    model = trainer.model
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    mom = model.momentum_state()
    for k, t in mom.items():
        t.data = arrays[f"momentum/{k}"].astype(t.dtype, copy=True)
    for k in trainer.opt.params:
        trainer.opt.m[k] = arrays[f"optim.m/{k}"].copy()
        trainer.opt.v[k] = arrays[f"optim.v/{k}"].copy()
    c = header["counters"]
    trainer.step_count, trainer.epoch, trainer.batch_index = c["step"], c["epoch"], c["batch_index"]
    trainer.opt.t = c["optim_t"]
    if model.memory is not None:
        for i, layer in enumerate(model.memory.layers):
            info = header["memory"][str(i)]
            mem = layer.memory
            if info["ready"]:
                mem.keys = arrays[f"prototype/{i}/keys"].copy()
                mem.values = arrays[f"prototype/{i}/values"].copy()
            mem.epoch, mem.batch_index, mem.rebuilds = info["epoch"], info["batch_index"], info["rebuilds"]
            entries = [(bid, arrays[f"bank/{i}/{j}/keys"], arrays[f"bank/{i}/{j}/values"])
                       for j, bid in enumerate(info["bank_ids"])]
            layer.bank.load_state(entries)
    for name, q in trainer.queues.items():
        q.rows = arrays[f"queue/{name}"].copy()
        q.count, q.cursor = header["queues"][name]["count"], header["queues"][name]["cursor"]
    return trainer
