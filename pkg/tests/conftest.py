"""Shared fixtures: tiny models and corpora small enough for fast tests."""

import numpy as np
import pytest

from fraudformer.data import (BehaviorEvent, BehaviorSequence, GeneratorConfig,
                              VocabSpec, generate_corpus)
from fraudformer.model import ModelConfig, init_params


TINY_VOCAB = VocabSpec(dims=(("kind", 4), ("level", 5)))

# One line per acceptance criterion, echoed after the terminal summary so the
# verdicts are visible even when pytest captures stdout.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_model_config(**overrides) -> ModelConfig:
    kw = dict(cardinalities=(4, 5), d_k=(4, 4), d_model=8, n_layers=1,
              n_heads=2, t_max=12, dropout=0.1)
    kw.update(overrides)
    return ModelConfig(**kw)


def make_sequence(rng: np.random.Generator, vocab: VocabSpec, t_len: int,
                  user_id: str = "u0", label: int = 0, onset=None) -> BehaviorSequence:
    events = [BehaviorEvent(tuple(int(rng.integers(1, c)) for c in vocab.cardinalities))
              for _ in range(t_len)]
    return BehaviorSequence(user_id, events, label, onset)


@pytest.fixture(scope="session")
def tiny_corpus():
    rng = np.random.default_rng(0)
    return [make_sequence(rng, TINY_VOCAB, int(rng.integers(3, 10)), f"u{i:03d}")
            for i in range(24)]


@pytest.fixture(scope="session")
def small_planted_corpus():
    """200 users, heavy fraud fraction, short sequences: SFT toy set."""
    cfg = GeneratorConfig(n_users=200, fraud_fraction=0.3, t_min=16, t_max=16, seed=5)
    return generate_corpus(cfg)


@pytest.fixture()
def tiny_params():
    cfg = tiny_model_config()
    return init_params(cfg, np.random.default_rng(7)), cfg


def f64_params(cfg: ModelConfig, seed: int = 7):
    from fraudformer.numerics.tensor import Tensor
    params = init_params(cfg, np.random.default_rng(seed))
    return {k: Tensor(v.data.astype(np.float64), requires_grad=True)
            for k, v in params.items()}
