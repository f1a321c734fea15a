import pytest

from sigbench.sigscheme import Scheme, keygen, setup


@pytest.fixture(scope="session")
def bls():
    return setup(128, Scheme.BLS)


@pytest.fixture(scope="session")
def eddsa():
    return setup(128, Scheme.EDDSA)


def make_keys(params, count, tag=b"k"):
    return [keygen(params, tag + i.to_bytes(4, "big")) for i in range(count)]


@pytest.fixture(scope="session")
def bls_keys(bls):
    return make_keys(bls, 64)


@pytest.fixture(scope="session")
def eddsa_keys(eddsa):
    return make_keys(eddsa, 64)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the summary is printed after the run."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name, ok, detail=""):
        lines.append((name, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in lines:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
