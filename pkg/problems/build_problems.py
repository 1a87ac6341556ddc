"""Regenerate the example problem files in this directory."""

from pathlib import Path

import numpy as np

from nnbarrier.geometry import Box
from nnbarrier.model import ControlStructure, GaussianNoise, NeuralNetwork, ProblemSpec, save_problem

HERE = Path(__file__).resolve().parent


def problems() -> dict[str, ProblemSpec]:
    out = {}
    out["minimal1d"] = ProblemSpec(
        network=NeuralNetwork.relu_affine([[0.5]], [0.0]),
        noise=GaussianNoise([1e-4]),
        safe_set=Box([-1.0], [1.0]),
        initial_set=Box([-0.1], [0.1]),
        state_space=Box([-2.0], [2.0]),
        horizon=10,
        threshold=0.9,
        partition_widths=[0.5],
        control=ControlStructure([[1.0]], [-1.0], [1.0]),
        name="minimal1d",
    )
    out["contraction2d"] = ProblemSpec(
        network=NeuralNetwork.relu_affine(0.5 * np.eye(2), [0.0, 0.0]),
        noise=GaussianNoise([1e-4, 1e-4]),
        safe_set=Box([-1.0, -1.0], [1.0, 1.0]),
        initial_set=Box([-0.1, -0.1], [0.1, 0.1]),
        state_space=Box([-2.0, -2.0], [2.0, 2.0]),
        horizon=10,
        threshold=0.9,
        partition_widths=[0.5, 0.5],
        name="contraction2d",
    )
    out["drift1d"] = ProblemSpec(
        network=NeuralNetwork.relu_affine([[1.0]], [0.2]),
        noise=GaussianNoise([1e-4]),
        safe_set=Box([-1.0], [1.0]),
        initial_set=Box([-0.1], [0.1]),
        state_space=Box([-2.0], [2.0]),
        horizon=10,
        threshold=0.95,
        partition_widths=[0.1],
        eta_step=0.05,
        control=ControlStructure([[1.0]], [-1.0], [1.0]),
        name="drift1d",
    )
    # linearised pendulum, dt = 0.05, realised exactly by a relu pair layer
    theta = np.pi / 15
    out["pendulum_style"] = ProblemSpec(
        network=NeuralNetwork.relu_affine([[1.0, 0.05], [0.5, 0.98]], [0.0, 0.0]),
        noise=GaussianNoise([1e-4, 1e-4]),
        safe_set=Box([-theta, -1.0], [theta, 1.0]),
        initial_set=Box([-np.pi / 36, -1.0], [np.pi / 36, 1.0]),
        state_space=Box([-2 * theta, -2.0], [2 * theta, 2.0]),
        horizon=10,
        threshold=0.9,
        partition_widths=[0.01745329, 0.1],
        eta_step=0.05,
        control=ControlStructure([[0.0], [0.1]], [-1.0], [1.0]),
        name="pendulum_style",
    )
    return out


if __name__ == "__main__":
    for name, spec in problems().items():
        save_problem(spec, HERE / f"{name}.json")
        print(HERE / f"{name}.json")
