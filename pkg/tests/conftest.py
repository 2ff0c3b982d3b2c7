import numpy as np
import pytest
import torch

from mtuda.data import GeneratorConfig, gen_synthetic_domains
from mtuda.segnet import NetworkConfig, StageSpec

torch.set_num_threads(1)

TINY_NET = NetworkConfig(
    stages=(StageSpec(3, 2, 8, 1, 1), StageSpec(3, 2, 16, 2, 1)),
    fpn_channels=8, local_proj_dim=4, local_proj_grid=2, global_proj_dim=6, aux_channels=4, mlp_ratio=2,
)

SMALL_GEN = GeneratorConfig(image_size=32, num_cases=4, slices_per_case=2, lesion_radius=(2.0, 3.5))


@pytest.fixture(scope="session")
def small_domains():
    return gen_synthetic_domains(SMALL_GEN, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """``record(name, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""
    def record(name, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
