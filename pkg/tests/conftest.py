import pytest

from seqcvae.corpus import build_vocab, default_grammar, generate_synthetic, split
from seqcvae.trainer import TrainConfig

# PASS/FAIL lines collected by the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_corpus():
    """40 scenes, 3 captions each, split 30/5/5."""
    ds = generate_synthetic(default_grammar(feature_dim=8), 40, 3, seed=0)
    train, val, test = split(ds, (0.75, 0.125, 0.125), seed=0)
    return ds, train, val, test, build_vocab(train)


@pytest.fixture
def tiny_config():
    return TrainConfig(latent_dim=4, hidden_dim=12, embed_dim=8, cond_dim=8, blm_hidden_dim=12, batch_size=8, max_steps=20, eval_interval=10, blm_steps=20, dtype="float64")
