import pytest
import torch

from ccot.data import Tokenizer, gen_corpus
from ccot.model import ModelConfig, TinyLM

torch.set_num_threads(1)


def small_config(**kw) -> ModelConfig:
    base = dict(vocab_size=32, hidden_dim=16, num_layers=3, num_heads=2, head_dim=8, max_seq_len=96)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tok():
    return Tokenizer.synthetic()


@pytest.fixture
def small_model():
    return TinyLM(small_config()).init_weights(0)


@pytest.fixture
def small_model64():
    return TinyLM(small_config()).init_weights(0).double()


@pytest.fixture(scope="session")
def corpus():
    return gen_corpus(5, 64)


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
