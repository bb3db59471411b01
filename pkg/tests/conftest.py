"""Shared model fixtures for the test suite."""

import pytest

from pspt.model import MicroLM, ModelConfig, Vocabulary


def make_demo_vocab():
    words = ["please", "generate", "question", "for", "this", "passage", ":", "."]
    words += [f"w{i}" for i in range(40)]
    return Vocabulary(words)


@pytest.fixture(scope="session")
def demo_model():
    vocab = make_demo_vocab()
    config = ModelConfig(vocab_size=len(vocab), dim=32, n_layers=2, n_heads=4, max_seq_len=96)
    return MicroLM.init(config, vocab, seed=1234)
