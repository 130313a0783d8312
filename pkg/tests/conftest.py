import numpy as np
import pytest

from featmix.core import RandomSource


def central_diff(f, x, h=1e-6):
    """Numerical gradient of scalar ``f`` at array ``x`` (perturbed in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    """Per-entry error denominated by max(1, |grad|)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n))))


@pytest.fixture
def rng():
    return RandomSource(1234)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record one ``criterion k: PASS|FAIL`` line; it prints inline and in the run summary."""
    def record(k: int, ok: bool, detail: str):
        line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append(line)
        capman = request.config.pluginmanager.getplugin("capturemanager")
        with capman.global_and_fixture_disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
