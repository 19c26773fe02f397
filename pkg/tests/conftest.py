import pytest

from firedispatch.experiment import make_instance

# acceptance results, reported in the terminal summary
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, ok, detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def small_instance():
    def build(seed=0, d=3, I=3, rho=0.1, gamma=0.6, correlated=False, sparseness=None):
        return make_instance(d, I, rho, gamma, correlated, seed, sparseness)
    return build
