from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dst_lab.corpus import SynthConfig, synth_corpus, synthetic_taxonomy


@pytest.fixture(scope="session")
def taxonomy():
    return synthetic_taxonomy()


@pytest.fixture(scope="session")
def small_corpus():
    """Spread-mode corpus: varied turn lengths, cumulative states."""
    config = SynthConfig(
        n_dialogues=4,
        turns_per_dialogue=8,
        feature_dim=8,
        slots_per_dialogue=4,
        noise_sigma=0.3,
    )
    return synth_corpus(123, config)


@pytest.fixture(scope="session")
def probe_corpus():
    """Uniform-length corpus: every user turn mentions the same four pairs."""
    config = SynthConfig(
        n_dialogues=10,
        turns_per_dialogue=6,
        feature_dim=8,
        slots_per_dialogue=4,
        noise_sigma=0.2,
        mentions_per_turn=4,
        fixed_domain="hotel",
    )
    return synth_corpus(7, config)
