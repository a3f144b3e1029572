import numpy as np
import pytest

from sparsegan.corpus import sentences_to_corpus, synth_grammar
from sparsegan.train import TrainConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_lines():
    lines, _ = synth_grammar(7, 60)
    return lines


@pytest.fixture(scope="session")
def small_corpus(toy_lines):
    return sentences_to_corpus(toy_lines)


@pytest.fixture
def tiny_config():
    """Small enough that a few adversarial steps take well under a second."""
    return TrainConfig(d=8, L=3, batch=4, n_critic=2, critic_filters=6, max_iters=4,
                       dae_epochs=1, gen_epochs=1, lr_pretrain=1e-2, embed_std=1.0,
                       checkpoint_every=2, seed=5)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request, capsys):
    """``criterion(name, ok, detail)`` prints one PASS/FAIL line and keeps it for the summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
