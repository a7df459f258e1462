import contextlib

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

_CRITERIA: dict[str, str] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, m, scale=1.0):
    A = rng.standard_normal((m, m))
    return scale * (A @ A.T / m + 0.5 * np.eye(m))


class Verdict:
    def __init__(self):
        self.ok = True
        self.notes: list[str] = []

    def check(self, ok: bool, note: str) -> bool:
        self.ok &= bool(ok)
        self.notes.append(("" if ok else "FAILED ") + note)
        return ok


@contextlib.contextmanager
def criterion(label: str, title: str):
    """Record one pass/fail line per acceptance criterion."""
    v = Verdict()
    try:
        yield v
    except Exception as exc:
        v.ok = False
        v.notes.append(f"error: {type(exc).__name__}: {exc}")
        raise
    finally:
        line = (f"criterion {label} [{'PASS' if v.ok else 'FAIL'}] {title}: "
                + "; ".join(v.notes))
        _CRITERIA[label] = line
        print(line)
    assert v.ok, line


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA, key=lambda k: (not k.isdigit(), k.zfill(3))):
            terminalreporter.write_line(_CRITERIA[k])
