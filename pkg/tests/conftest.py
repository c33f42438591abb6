import numpy as np
import pytest

from attnp.model import ModelConfig, batch_from_ids, init_params


def tiny_model(kind="pair", vocab=9, d=4, m=4, da=2, labels=3, seed=0):
    config = ModelConfig(vocab, labels, d, m, da, kind)
    params = init_params(config, np.random.default_rng(seed))
    return config, params


def random_batch(rng, B=3, T=5, vocab=9, labels=3, pair=True, min_len=1):
    lens = rng.integers(min_len, T + 1, size=B)
    lens[0] = T
    ids = [list(rng.integers(2, vocab, size=n)) for n in lens]
    y = rng.integers(0, labels, size=B)
    q = [list(rng.integers(2, vocab, size=int(rng.integers(1, 4)))) for _ in range(B)] if pair else None
    return batch_from_ids(ids, y, q)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
