import numpy as np
import pytest

from fsreal.model import ModelParams


def random_params(rng: np.random.Generator, sizes: dict[str, int], scale: float = 1.0) -> ModelParams:
    return ModelParams({k: rng.normal(0, scale, n) for k, n in sizes.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
