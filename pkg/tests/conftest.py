import numpy as np
import pytest

from esdllm.model import ModelConfig, init_toy_model

SMALL = ModelConfig(num_layers=4, hidden_dim=32, num_heads=4, ffn_dim=64, vocab_size=67)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_model():
    return init_toy_model(SMALL, 7)


@pytest.fixture(scope="session")
def default_model():
    return init_toy_model(ModelConfig(), 0)


def make_prompt(cfg: ModelConfig, n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    allowed = np.array([t for t in range(cfg.vocab_size) if t not in (cfg.mask_token_id, cfg.eos_token_id)])
    return allowed[rng.integers(0, allowed.size, n)]


# acceptance criteria report one line each; shown in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
