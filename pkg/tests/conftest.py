import pytest

from anchorvoice.corpus import make_synthetic_corpus, read_manifest
from anchorvoice.trainer import TrainConfig


@pytest.fixture(scope="session")
def corpus_factory(tmp_path_factory):
    """seed -> (manifest path, entries); each corpus is generated once per session."""
    cache = {}

    def get(seed):
        if seed not in cache:
            path = make_synthetic_corpus(tmp_path_factory.mktemp(f"corpus{seed}"), seed=seed)
            cache[seed] = (path, read_manifest(path))
        return cache[seed]

    return get


@pytest.fixture(scope="session")
def corpus(corpus_factory):
    return corpus_factory(0)


# narrow widths keep the plumbing tests fast
TINY = dict(text_dim=32, enc_hidden=16, style_dim=8, window=16, log_every=10)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(total_steps=60, **TINY)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
