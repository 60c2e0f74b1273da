import numpy as np
import pytest

from suabench.experiments import prepare_task
from suabench.model import init_params


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_factual():
    return prepare_task("factual", 0, sizes=(120, 60, 80, 80))


@pytest.fixture(scope="session")
def small_ambiguous():
    return prepare_task("ambiguous", 0, sizes=(120, 60, 80, 80))


@pytest.fixture
def tiny_params(small_factual):
    world, _ = small_factual
    return init_params(world.vocab_size, world.num_labels, np.random.default_rng(7),
                       d_emb=4, d_hid=5, scale=0.5)


# --- acceptance summary -------------------------------------------------------

@pytest.fixture(scope="session")
def acceptance_log(request):
    """Records one (passed, detail) verdict per acceptance criterion."""
    if not hasattr(request.config, "_acceptance"):
        request.config._acceptance = {}
    return request.config._acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, passed, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}")
