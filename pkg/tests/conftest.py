from __future__ import annotations

import numpy as np
import pytest
import torch

from mcslu import simasr

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def grammar():
    return simasr.default_grammar()


@pytest.fixture(scope="session")
def small_dataset(grammar):
    """A 600/100/200 dataset with default noise, shared across tests."""
    return simasr.gen_dataset(
        grammar, simasr.SimConfig(), {"train": 600, "valid": 100, "test": 200}
    )


@pytest.fixture(scope="session")
def frontend(grammar):
    return simasr.FrozenAsrFrontend(grammar.word_vocabulary(), simasr.SimConfig())


@pytest.fixture(scope="session")
def ten_k_utterances(grammar):
    return simasr.gen_corpus(grammar, 10_000, seed=123)


@pytest.fixture()
def rng():
    return np.random.default_rng(99)
