"""Synthetic multimodal cohorts and their on-disk layout."""

from __future__ import annotations

import csv
import dataclasses
import os
import struct
from dataclasses import dataclass, field

import numpy as np
import yaml

from .config import ConfigError
from .knowledge_bank import FactorRecord, FactorSchema, FactorSpec

VOLUME_MAGIC = b"HDXV"
VOLUME_VERSION = 1
COHORT_VERSION = 1
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)


def default_schema():
    return FactorSchema((
        FactorSpec("Age", "demographic", unit="years old"),
        FactorSpec("Gender", "demographic", choices=("Male", "Female")),
        FactorSpec("MMSE", "numeric", label="MMSE score"),
        FactorSpec("MoCA", "numeric", label="MoCA score"),
        FactorSpec("Vitamin B12", "numeric"),
        FactorSpec("APOE", "categorical", label="APOE genotype", choices=("e3/e3", "e3/e4", "e4/e4")),
        FactorSpec("Smoking", "boolean"),
    ))


def knowledge_signal_schema():
    base = list(default_schema().factors)
    base += [FactorSpec("Serum pTau217", "boolean", channel="knowledge"),
             FactorSpec("Serum Abeta42", "boolean", channel="knowledge")]
    return FactorSchema(tuple(base))


@dataclass
class SyntheticCohortConfig:
    """Generator settings.

    ``image_signal`` scales the class gap in blob intensity (0 = none).
    ``factor_signal`` scales class gaps in the clinical factor distributions.
    ``knowledge_signal`` attaches a class-specific knowledge marker to every
    subject while keeping text and image class-independent.
    """

    n_subjects: int = 100
    class_balance: float = 0.5
    volume_side: int = 32
    image_signal: float = 1.0
    factor_signal: float = 1.0
    knowledge_signal: bool = False
    missing_rate: float = 0.15
    noise: float = 0.05
    blob_radius: float = 0.18  # fraction of the side
    seed: int = 0

    def validate(self):
        if self.n_subjects < 10:
            raise ConfigError("n_subjects must be at least 10 to populate 70/10/20 splits")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError("class_balance must lie strictly between 0 and 1")
        if self.volume_side < 4:
            raise ConfigError("volume_side too small")
        return self

    @property
    def schema(self):
        return knowledge_signal_schema() if self.knowledge_signal else default_schema()

    @classmethod
    def null_signal(cls, **kw):
        return cls(image_signal=0.0, factor_signal=0.0, **kw)

    @classmethod
    def knowledge_only(cls, **kw):
        return cls(image_signal=0.0, factor_signal=0.0, knowledge_signal=True, **kw)


@dataclass
class Cohort:
    config: SyntheticCohortConfig
    schema: FactorSchema
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name):
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    @property
    def all_records(self):
        return self.train + self.val + self.test


def blob_center(side):
    c = side * 0.35
    return np.array([c, c, side * 0.5])


def blob_mask(side, radius_frac=0.18):
    grid = np.indices((side,) * 3).transpose(1, 2, 3, 0) + 0.5
    r = np.linalg.norm(grid - blob_center(side), axis=-1)
    return r <= radius_frac * side


def _volume(rng, cfg, label):
    side = cfg.volume_side
    vol = 0.2 + cfg.noise * rng.standard_normal((side,) * 3)
    grid = np.indices((side,) * 3).transpose(1, 2, 3, 0) + 0.5
    r = np.linalg.norm(grid - blob_center(side), axis=-1)
    amp = 0.5 - 0.25 * cfg.image_signal * label + 0.05 * rng.standard_normal()
    vol += amp * np.exp(-0.5 * (r / (cfg.blob_radius * side)) ** 2)
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def _factors(rng, cfg, schema, label):
    s = cfg.factor_signal * label
    vals = {
        "Age": int(np.clip(round(rng.normal(70 + 6 * s, 6)), 55, 95)),
        "Gender": "Male" if rng.random() < 0.5 else "Female",
        "MMSE": int(np.clip(round(rng.normal(28 - 5 * s, 1.5 + s)), 0, 30)),
        "MoCA": int(np.clip(round(rng.normal(26 - 6 * s, 2)), 0, 30)),
        "Vitamin B12": round(float(rng.normal(520 - 90 * s, 80)), 1),
        "APOE": str(rng.choice(["e3/e3", "e3/e4", "e4/e4"], p=_apoe_probs(s))),
        "Smoking": bool(rng.random() < 0.25 + 0.15 * s),
    }
    for name in ("MMSE", "MoCA", "Vitamin B12", "APOE", "Smoking"):
        if rng.random() < cfg.missing_rate:
            vals[name] = None
    if cfg.knowledge_signal:
        vals["Serum pTau217"] = bool(label == 1)
        vals["Serum Abeta42"] = bool(label == 0)
    return {f.name: vals[f.name] for f in schema}


def _apoe_probs(s):
    p = np.array([0.65 - 0.3 * s, 0.3 + 0.15 * s, 0.05 + 0.15 * s])
    return p / p.sum()


def generate_cohort(cfg):
    """Stratified 70/10/20 subject splits with class-conditional images and factors."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    schema = cfg.schema
    n1 = int(round(cfg.class_balance * cfg.n_subjects))
    labels = np.array([1] * n1 + [0] * (cfg.n_subjects - n1))
    rng.shuffle(labels)
    records = []
    for i, y in enumerate(labels):
        records.append(FactorRecord(
            subject_id=f"S{i:05d}",
            image_volume=_volume(rng, cfg, int(y)),
            non_imaging=_factors(rng, cfg, schema, int(y)),
            label=int(y),
        ))
    cohort = Cohort(cfg, schema)
    for cls in (0, 1):
        members = [r for r in records if r.label == cls]
        idx = rng.permutation(len(members))
        n_tr = int(round(SPLIT_FRACTIONS[0] * len(members)))
        n_va = int(round(SPLIT_FRACTIONS[1] * len(members)))
        for j, k in enumerate(idx):
            part = "train" if j < n_tr else "val" if j < n_tr + n_va else "test"
            cohort.split(part).append(members[k])
    for part in ("train", "val", "test"):
        cohort.split(part).sort(key=lambda r: r.subject_id)
        if not cohort.split(part):
            raise ConfigError(f"split {part!r} is empty; increase n_subjects")
    return cohort


# -- volume and cohort files ------------------------------------------------------

def write_volume(path, volume):
    vol = np.asarray(volume, dtype="<f4")
    side = vol.shape[0]
    if vol.shape != (side,) * 3:
        raise ValueError(f"volume must be cubic, got {vol.shape}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC + struct.pack("<III", VOLUME_VERSION, side, 0))
        fh.write(vol.tobytes(order="C"))


def read_volume(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if header[:4] != VOLUME_MAGIC:
            raise ValueError(f"{path}: not a volume file")
        version, side, _ = struct.unpack("<III", header[4:])
        if version != VOLUME_VERSION:
            raise ValueError(f"{path}: unsupported volume version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape((side,) * 3).astype(np.float32)


def _schema_to_list(schema):
    out = []
    for f in schema:
        d = {k: v for k, v in dataclasses.asdict(f).items() if v is not None}
        if "choices" in d:
            d["choices"] = list(d["choices"])
        out.append(d)
    return out


def _schema_from_list(items):
    specs = []
    for d in items:
        d = dict(d)
        if "choices" in d:
            d["choices"] = tuple(d["choices"])
        specs.append(FactorSpec(**d))
    return FactorSchema(tuple(specs))


def _cell(value):
    if value is None:
        return "NA"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse(spec, cell):
    if cell == "NA":
        return None
    if spec.kind == "boolean":
        return cell == "true"
    if spec.kind == "numeric" or (spec.kind == "demographic" and spec.choices is None):
        v = float(cell)
        return int(v) if v.is_integer() and "." not in cell else v
    return cell


def save_cohort(cohort, directory):
    os.makedirs(os.path.join(directory, "volumes"), exist_ok=True)
    meta = {"version": COHORT_VERSION, "config": dataclasses.asdict(cohort.config),
            "schema": _schema_to_list(cohort.schema)}
    with open(os.path.join(directory, "cohort.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(meta, fh, sort_keys=True)
    names = cohort.schema.names
    with open(os.path.join(directory, "records.tsv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["subject_id", "split", "label", "volume"] + names)
        for part in ("train", "val", "test"):
            for r in cohort.split(part):
                vol_rel = f"volumes/{r.subject_id}.vol"
                write_volume(os.path.join(directory, vol_rel), r.image_volume)
                w.writerow([r.subject_id, part, r.label, vol_rel] + [_cell(r.non_imaging[n]) for n in names])


def load_cohort(directory):
    with open(os.path.join(directory, "cohort.yaml"), encoding="utf-8") as fh:
        meta = yaml.safe_load(fh)
    if meta.get("version") != COHORT_VERSION:
        raise ConfigError(f"cohort format version {meta.get('version')} unsupported")
    cfg = SyntheticCohortConfig(**meta["config"])
    schema = _schema_from_list(meta["schema"])
    cohort = Cohort(cfg, schema)
    with open(os.path.join(directory, "records.tsv"), encoding="utf-8", newline="") as fh:
        rows = csv.DictReader(fh, delimiter="\t")
        for row in rows:
            rec = FactorRecord(
                subject_id=row["subject_id"],
                image_volume=read_volume(os.path.join(directory, row["volume"])),
                non_imaging={f.name: _parse(f, row[f.name]) for f in schema},
                label=int(row["label"]),
            )
            cohort.split(row["split"]).append(rec)
    return cohort
