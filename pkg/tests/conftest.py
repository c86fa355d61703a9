import numpy as np
import pytest
from hypothesis import settings

from segstereo import tensor as T

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# acceptance criteria report here; printed once at the end of the session
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def report(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def param(x) -> T.Tensor:
    """float64 leaf that requires a gradient."""
    return T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def grads_of(f, *leaves):
    """Run ``f(*leaves)`` under a tape; return (value, [grad per leaf])."""
    with T.Tape() as tape:
        out = f(*leaves)
    g = T.backward(tape, out)
    return out.item(), [g[x.node_id].data if x.node_id in g else np.zeros_like(x.data) for x in leaves]
