from __future__ import annotations

import numpy as np
import pytest

from dualweaver.data import gen_coupled_ar
from dualweaver.forecaster import fit_ridge_ar
from dualweaver.weaver import DualWeaverModel


def randomize(model: DualWeaverModel, seed: int, scale: float = 0.3, w_spread: float = 0.5) -> DualWeaverModel:
    """Perturb every fusion tensor and draw surrogate weights around 1."""
    gen = np.random.default_rng(seed)
    for v in model.fusion.params.values():
        v += scale * gen.standard_normal(v.shape)
    C = model.n_channels
    model.w_alpha[:] = 1.0 + w_spread * gen.uniform(-1, 1, C)
    model.w_beta[:] = 1.0 + w_spread * gen.uniform(-1, 1, C)
    return model


@pytest.fixture(scope="session")
def ridge():
    return fit_ridge_ar(gen_coupled_ar(0, 600, 3, 0.8, 0.9), 4, 1e-3, 8, 4)


@pytest.fixture(scope="session")
def ridge_tanh():
    return fit_ridge_ar(gen_coupled_ar(0, 600, 3, 0.8, 0.9), 4, 1e-3, 8, 4, n_features=6, feature_scale=2.0)


ACCEPTANCE: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> bool:
    """Record one acceptance verdict line; the caller asserts on the return value."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion:>2}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
