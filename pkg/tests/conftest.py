import numpy as np
import pytest

from nnbarrier.geometry import Box, partition_uniform
from nnbarrier.model import ControlStructure, GaussianNoise, NeuralNetwork, ProblemSpec
from nnbarrier.relax import bound_partition
from nnbarrier.sos.solve import clarabel_available


def contraction_spec(widths=(0.5, 0.5)) -> ProblemSpec:
    return ProblemSpec(
        network=NeuralNetwork.relu_affine(0.5 * np.eye(2), [0.0, 0.0]),
        noise=GaussianNoise([1e-4, 1e-4]),
        safe_set=Box([-1.0, -1.0], [1.0, 1.0]),
        initial_set=Box([-0.1, -0.1], [0.1, 0.1]),
        state_space=Box([-2.0, -2.0], [2.0, 2.0]),
        horizon=10,
        threshold=0.9,
        partition_widths=list(widths),
        barrier_degree=4,
    )


def drift_spec() -> ProblemSpec:
    return ProblemSpec(
        network=NeuralNetwork.relu_affine([[1.0]], [0.2]),
        noise=GaussianNoise([1e-4]),
        safe_set=Box([-1.0], [1.0]),
        initial_set=Box([-0.1], [0.1]),
        state_space=Box([-2.0], [2.0]),
        horizon=10,
        threshold=0.95,
        partition_widths=[0.1],
        barrier_degree=4,
        eta_step=0.05,
        control=ControlStructure([[1.0]], [-1.0], [1.0]),
    )


def setup(spec, mode="linear"):
    part = partition_uniform(spec.safe_set, spec.partition_widths)
    return part, bound_partition(spec.network, part, mode)


@pytest.fixture
def contraction():
    return contraction_spec()


@pytest.fixture
def drift():
    return drift_spec()


BACKENDS = ["reference"] + (["clarabel"] if clarabel_available() else [])


# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
