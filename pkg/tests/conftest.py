import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from pointpeft.backbone import EncoderConfig


@pytest.fixture(autouse=True, scope="session")
def _single_thread_blas():
    # bitwise determinism checks assume one BLAS thread
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_enc():
    return EncoderConfig(depth=2, dim=16, heads=2, ffn_ratio=2, tokens=8, patch_size=8, num_classes=4,
                         tokenizer_hidden=8, tokenizer_width=16, pos_hidden=8, head_hidden=16)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


ACCEPTANCE_LINES: list[str] = []


def acceptance_line(n: int, ok: bool, detail: str) -> None:
    """Record one criterion outcome; echoed again in the terminal summary."""
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
