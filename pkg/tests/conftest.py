import pytest

from styleam.data import generate_toy_domains


@pytest.fixture(scope="session")
def small_toy(tmp_path_factory):
    """A 48/40 image benchmark shared by the fast tests."""
    out = tmp_path_factory.mktemp("toy_small")
    return generate_toy_domains(out, n_source=48, n_target=40, seed=11)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
