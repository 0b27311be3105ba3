import warnings

import numpy as np
import pytest

from bdmhj.errors import AssumptionWarning
from bdmhj.model import (ConstantFunction, CosineFunction, GaussianKernel, ModelSpec, RateFunctions,
                         ScalingParams)


def constant_rates(b=2.0, d=1.0, p=1.0) -> RateFunctions:
    return RateFunctions(ConstantFunction(b), ConstantFunction(d), ConstantFunction(p))


def cosine_rates() -> RateFunctions:
    return RateFunctions(CosineFunction(2.0, 0.5), ConstantFunction(1.0), ConstantFunction(1.0))


def make_spec(K=1e3, m=7, rates=None, kernel=None, **scaling) -> ModelSpec:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssumptionWarning)
        return ModelSpec(kernel or GaussianKernel(1.0), rates or constant_rates(), ScalingParams(K=K, m=m, **scaling))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
