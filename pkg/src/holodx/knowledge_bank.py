"""Factor knowledge store, LLM client interface and textualisation of non-imaging records."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
import yaml

log = logging.getLogger(__name__)

BANK_FORMAT_VERSION = 1
PROMPT_TEMPLATE = "Please describe the relationship between {factor} and AD diagnosis."
KNOWLEDGE_DELIMITER = "\n"
UNKNOWN_KNOWLEDGE = "No knowledge is recorded for {factor}."

FACTOR_KINDS = ("numeric", "boolean", "categorical", "demographic")


class BankVersionError(ValueError):
    """The bank file was written by an incompatible format version."""


class RecordError(ValueError):
    """A factor value does not fit the declared schema."""


# -- factor schema and records ------------------------------------------------

@dataclass(frozen=True)
class FactorSpec:
    """One declared factor.

    ``channel`` is ``"data"`` for factors rendered into the subject's text, or
    ``"knowledge"`` for boolean markers that only decide whether the factor's
    knowledge entry is attached to the subject.
    """

    name: str
    kind: str = "numeric"
    label: Optional[str] = None
    unit: Optional[str] = None
    choices: Optional[tuple] = None
    channel: str = "data"

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise ValueError(f"unknown factor kind {self.kind!r}")
        if self.channel not in ("data", "knowledge"):
            raise ValueError(f"unknown factor channel {self.channel!r}")
        if self.channel == "knowledge" and self.kind != "boolean":
            raise ValueError("knowledge-channel factors must be boolean markers")

    @property
    def display(self):
        if self.label:
            return self.label
        return f"{self.name} history" if self.kind == "boolean" else self.name


@dataclass(frozen=True)
class FactorSchema:
    factors: tuple

    def __post_init__(self):
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ValueError("factor names must be unique")

    @property
    def names(self):
        return [f.name for f in self.factors]

    def __getitem__(self, name):
        for f in self.factors:
            if f.name == name:
                return f
        raise KeyError(name)

    def __iter__(self):
        return iter(self.factors)

    def __len__(self):
        return len(self.factors)

    def order(self, names):
        wanted = set(names)
        return [n for n in self.names if n in wanted]


@dataclass
class FactorRecord:
    subject_id: str
    image_volume: np.ndarray
    non_imaging: dict
    label: int

    def present_factors(self, schema):
        """Factors whose knowledge applies to this subject, in schema order."""
        out = []
        for spec in schema:
            v = self.non_imaging.get(spec.name)
            if spec.channel == "knowledge":
                if v is True:
                    out.append(spec.name)
            elif v is not None:
                out.append(spec.name)
        return out


def format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        if float(value).is_integer():
            return str(int(value))
        return np.format_float_positional(float(value), trim="-")
    return str(value)


def _check_value(spec, value, subject_id):
    ok = True
    if spec.kind == "numeric":
        ok = isinstance(value, (int, float, np.integer, np.floating)) and not isinstance(value, (bool, np.bool_))
    elif spec.kind == "boolean":
        ok = isinstance(value, (bool, np.bool_))
    elif spec.kind in ("categorical", "demographic"):
        ok = not isinstance(value, (bool, np.bool_)) and (spec.choices is None or value in spec.choices)
    if not ok:
        raise RecordError(f"subject {subject_id}: factor {spec.name!r} has invalid {spec.kind} value {value!r}")


def factor_sentence(spec, value, subject_id="?"):
    if value is None:
        return f"{spec.display} is unknown."
    _check_value(spec, value, subject_id)
    if spec.kind == "numeric":
        return f"The {spec.display} is {format_value(value)}."
    if spec.kind == "boolean":
        return f"{spec.display} is {'existent' if value else 'non-existent'}."
    unit = f" {spec.unit}" if spec.unit else ""
    return f"{spec.display} is {format_value(value)}{unit}."


def textualize(record, schema):
    """Render every data-channel factor of ``record`` as one sentence, in schema order."""
    unknown = set(record.non_imaging) - set(schema.names)
    if unknown:
        raise RecordError(f"subject {record.subject_id}: undeclared factors {sorted(unknown)}")
    sentences = [
        factor_sentence(spec, record.non_imaging.get(spec.name), record.subject_id)
        for spec in schema if spec.channel == "data"
    ]
    return " ".join(sentences)


# -- knowledge bank ------------------------------------------------------------

@dataclass
class KnowledgeEntry:
    factor_name: str
    llm_text: str = ""
    expert_text: Optional[str] = None
    source_model: str = ""
    created_at: str = ""

    def __post_init__(self):
        if not (self.llm_text or self.expert_text):
            raise ValueError(f"knowledge entry {self.factor_name!r} needs LLM or expert text")

    def render(self):
        parts = [t for t in (self.expert_text, self.llm_text) if t]
        return " ".join(parts)


class LLMClient(Protocol):
    model_tag: str

    def complete(self, prompt: str) -> str: ...


_STUB_PHRASES = (
    "Abnormal {f} findings are reported more often in patients who later receive an AD diagnosis.",
    "{f} is routinely reviewed by clinicians when screening for cognitive decline and AD.",
    "Changes in {f} can accompany neurodegeneration, so {f} supports AD risk assessment.",
    "Clinicians weigh {f} together with imaging because {f} alone cannot confirm AD.",
)


class StubLLMClient:
    """Deterministic offline client: canned text chosen by a hash of the factor name."""

    model_tag = "stub"

    def __init__(self, canned=None, fail_on=()):
        self.canned = dict(canned or {})
        self.fail_on = set(fail_on)
        self.calls = 0

    def complete(self, prompt):
        self.calls += 1
        factor = prompt[len("Please describe the relationship between "):-len(" and AD diagnosis.")]
        if factor in self.fail_on:
            raise ConnectionError(f"stub failure for {factor}")
        if factor in self.canned:
            return self.canned[factor]
        h = int(hashlib.sha256(factor.encode("utf-8")).hexdigest(), 16)
        return _STUB_PHRASES[h % len(_STUB_PHRASES)].format(f=factor)


@dataclass
class LLMClientConfig:
    endpoint: str = ""
    model: str = ""
    timeout: float = 30.0
    api_key: str = ""

    @classmethod
    def load(cls, path=None, environ=None):
        env = os.environ if environ is None else environ
        raw = {}
        if path:
            with open(path, encoding="utf-8") as fh:
                raw = (yaml.safe_load(fh) or {}).get("llm", {})
        cfg = cls(**{k: v for k, v in raw.items() if k in cls.__dataclass_fields__})
        overrides = {"endpoint": "HOLODX_LLM_ENDPOINT", "model": "HOLODX_LLM_MODEL",
                     "timeout": "HOLODX_LLM_TIMEOUT", "api_key": "HOLODX_LLM_API_KEY"}
        for attr, var in overrides.items():
            if var in env:
                val = env[var]
                setattr(cfg, attr, float(val) if attr == "timeout" else val)
        return cfg


class HTTPLLMClient:
    """POSTs ``{"model", "prompt"}`` as JSON and reads ``text`` (or an OpenAI-style choice) back."""

    def __init__(self, config):
        if not config.endpoint:
            raise ValueError("LLM endpoint is not configured")
        self.config = config
        self.model_tag = config.model or "http"

    def complete(self, prompt):
        body = json.dumps({"model": self.config.model, "prompt": prompt}).encode("utf-8")
        req = urllib.request.Request(self.config.endpoint, data=body,
                                     headers={"Content-Type": "application/json"})
        if self.config.api_key:
            req.add_header("Authorization", f"Bearer {self.config.api_key}")
        with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        if "text" in payload:
            return payload["text"]
        choice = payload["choices"][0]
        return choice.get("text") or choice["message"]["content"]


def _now():
    return _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0).isoformat()


@dataclass
class KnowledgeBank:
    entries: dict = field(default_factory=dict)
    format_version: int = BANK_FORMAT_VERSION

    def __contains__(self, factor):
        return factor in self.entries

    def __len__(self):
        return len(self.entries)

    def lookup(self, factor):
        return self.entries.get(factor)

    def generate(self, factor, client, clock=_now):
        """Fill ``factor``'s LLM text, calling ``client`` only when none is cached."""
        entry = self.entries.get(factor)
        if entry is not None and entry.llm_text:
            return entry.llm_text
        try:
            text = client.complete(PROMPT_TEMPLATE.format(factor=factor))
        except Exception as exc:  # noqa: BLE001 - any client failure degrades to empty text
            log.error("knowledge generation for %s failed: %s", factor, exc)
            text = ""
        if entry is not None:
            entry.llm_text = text
            entry.source_model = getattr(client, "model_tag", "")
        elif text:
            self.entries[factor] = KnowledgeEntry(factor, llm_text=text,
                                                  source_model=getattr(client, "model_tag", ""),
                                                  created_at=clock())
        return text

    def add_expert(self, factor, text, clock=_now):
        if not text:
            raise ValueError("expert text must be non-empty")
        entry = self.entries.get(factor)
        if entry is None:
            self.entries[factor] = KnowledgeEntry(factor, expert_text=text, source_model="expert",
                                                  created_at=clock())
        else:
            entry.expert_text = text
        return self

    def render(self, factors):
        """Per-factor knowledge texts (expert before LLM) in the given order."""
        out = []
        for f in factors:
            entry = self.entries.get(f)
            if entry is None:
                log.warning("no knowledge entry for %s; using sentinel", f)
                out.append(UNKNOWN_KNOWLEDGE.format(factor=f))
            else:
                out.append(entry.render())
        return out

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "entries": [
                {"factor": e.factor_name, "llm_text": e.llm_text, "expert_text": e.expert_text,
                 "source_model": e.source_model, "created_at": e.created_at}
                for e in self.entries.values()
            ],
        }

    @classmethod
    def from_dict(cls, raw):
        version = raw.get("format_version")
        if version != BANK_FORMAT_VERSION:
            raise BankVersionError(f"bank format version {version!r} cannot be read by version "
                                   f"{BANK_FORMAT_VERSION}; migrate the file explicitly")
        bank = cls()
        for item in raw.get("entries") or []:
            e = KnowledgeEntry(item["factor"], llm_text=item.get("llm_text") or "",
                               expert_text=item.get("expert_text"),
                               source_model=item.get("source_model") or "",
                               created_at=item.get("created_at") or "")
            if e.factor_name in bank.entries:
                raise ValueError(f"duplicate factor {e.factor_name!r} in bank file")
            bank.entries[e.factor_name] = e
        return bank

    def persist(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, allow_unicode=True, sort_keys=False, width=100)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


def generate_knowledge(bank, factor, llm_client):
    return bank.generate(factor, llm_client)


def add_expert(bank, factor, text):
    return bank.add_expert(factor, text)


def render_knowledge(bank, factors_present, schema=None):
    """The subject's knowledge text x_K: one block per present factor, schema order."""
    factors = schema.order(factors_present) if schema is not None else list(factors_present)
    return KNOWLEDGE_DELIMITER.join(bank.render(factors))


def persist(bank, path):
    bank.persist(path)


def load(path):
    return KnowledgeBank.load(path)
