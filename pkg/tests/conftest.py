import sys

import pytest
import torch

from rfid.data import SynthesisConfig, Vocabulary, generate_synthetic_corpus, split_corpus
from rfid.model import ModelConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(SynthesisConfig(n_examples=60, seed=3))


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return Vocabulary.from_corpus(small_corpus)


@pytest.fixture(scope="session")
def small_splits(small_corpus):
    return split_corpus(small_corpus)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(K=2, L=8, d=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, vocab_size=40, max_target_len=4)


@pytest.fixture
def corpus_cfg(small_vocab):
    return ModelConfig(K=4, L=32, d=16, n_enc_layers=1, n_dec_layers=2, n_heads=2, vocab_size=len(small_vocab),
                       max_target_len=6)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is not None and module.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(module.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
