import numpy as np
import pytest

from rwkv_asr.verify import tiny_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    """Two-block d=8 model with perturbed, non-trivial parameters (f64)."""
    return tiny_model(np.random.default_rng(42), blocks=2)


# -- acceptance reporting -----------------------------------------------------------
_LINES = pytest.StashKey[dict]()


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.ok = False
        self.detail = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'} criterion {self.number:2d} {self.title}: {self.detail}"


def pytest_configure(config):
    config.stash[_LINES] = {}


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    from contextlib import contextmanager

    @contextmanager
    def record(number: int, title: str):
        c = _Criterion(number, title)
        try:
            yield c
        except Exception as e:  # an unexpected error is a failed criterion, re-raised for pytest
            c.ok, c.detail = False, f"{type(e).__name__}: {e}"
            raise
        finally:
            request.config.stash[_LINES][number] = c.line()

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
