import numpy as np
import pytest

from deduplicator import kernels


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    """A kernel module: the compiled one and the numpy fallback."""
    return kernels.BACKENDS[request.param]


@pytest.fixture(params=sorted(kernels.BACKENDS))
def use_backend(request, monkeypatch):
    """Route every kernel call in the package through one backend."""
    impl = kernels.BACKENDS[request.param]
    for name in ("signature", "nearest", "argmax_rows", "find_slice"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
