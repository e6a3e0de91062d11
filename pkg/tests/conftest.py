import os
import sys

import numpy as np
import pytest

from selfstrae.model import ModelConfig, ModelParams, new_model

HERE = os.path.dirname(__file__)
sys.path.insert(0, HERE)


def make_params(V, k, u, tied=False, **arrays):
    """A model whose listed arrays are replaced by the given values."""
    cfg = ModelConfig(V=V, E=k * u, k=k, u=u, tied=tied)
    base = new_model(cfg, 0).as_dict()
    base.update({n: np.asarray(a, dtype=np.float64) for n, a in arrays.items()})
    return ModelParams(cfg, **base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    cfg = ModelConfig(V=12, E=6, k=2, u=3)
    return new_model(cfg, 3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        status, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {status} - {detail}")
