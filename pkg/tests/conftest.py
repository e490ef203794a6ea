import sys

import numpy as np
import pytest

from holodx.cohort import SyntheticCohortConfig, generate_cohort
from holodx.config import ModelConfig, RunConfig, TrainConfig
from holodx.knowledge_bank import KnowledgeBank, StubLLMClient


def tiny_model_config(**kw):
    base = dict(embed_dim=16, heads=2, encoder_layers=1, decoder_layers=1, kl_layers=1, mem_layers=1,
                volume_side=16, patch_side=8, prototypes=4, topk=2, contrastive_dim=8,
                max_text_len=64, knowledge_len=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_run_config(seed=5, model=None, **train):
    tr = dict(batch_size=4, queue_size=16, seed=seed)
    tr.update(train)
    return RunConfig(model=model or tiny_model_config(), train=TrainConfig(**tr))


def stub_bank(schema):
    bank = KnowledgeBank()
    client = StubLLMClient()
    for f in schema.names:
        bank.generate(f, client)
    return bank


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def small_cohort():
    return generate_cohort(SyntheticCohortConfig.knowledge_only(n_subjects=40, seed=2, volume_side=16))


@pytest.fixture(scope="session")
def small_bank(small_cohort):
    return stub_bank(small_cohort.schema)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
