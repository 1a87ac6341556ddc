"""Neural-network dynamic models and their problem files.

A problem file is a JSON document (``"schema_version": 1``) holding the
network, the diagonal noise variances, the state/safe/initial boxes, the
certification parameters and an optional control structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .geometry import Box
from .poly import ArityError

SCHEMA_VERSION = 1


class ProblemError(ValueError):
    """Raised for malformed or inconsistent problem specifications.

    ``field`` names the offending entry, e.g. ``"sets.initial"``.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"


def _ro(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        arr = arr.reshape((-1,) if ndim == 1 else arr.shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        W = np.array(self.weight, dtype=float)
        if W.ndim == 1:
            W = W.reshape(1, -1)
        if W.ndim != 2:
            raise ProblemError("weight must be a matrix", "layer.weight")
        b = np.array(self.bias, dtype=float).reshape(-1)
        if b.shape[0] != W.shape[0]:
            raise ProblemError(f"bias length {b.shape[0]} != weight rows {W.shape[0]}", "layer.bias")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ProblemError("weights and biases must be finite", "layer")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", W)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def dim_in(self) -> int:
        return self.weight.shape[1]

    @property
    def dim_out(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class NeuralNetwork:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ProblemError("network needs at least one layer", "network.layers")
        for k in range(1, len(layers)):
            if layers[k].dim_in != layers[k - 1].dim_out:
                raise ProblemError(
                    f"layer {k} expects {layers[k].dim_in} inputs but layer {k - 1} has {layers[k - 1].dim_out} outputs",
                    "network.layers",
                )
        object.__setattr__(self, "layers", layers)

    @property
    def dim_in(self) -> int:
        return self.layers[0].dim_in

    @property
    def dim_out(self) -> int:
        return self.layers[-1].dim_out

    def forward(self, X: np.ndarray) -> np.ndarray:
        """Batched evaluation; ``X`` has shape ``(batch, dim_in)``."""
        h = np.asarray(X, dtype=float)
        for layer in self.layers:
            h = h @ layer.weight.T + layer.bias
            if layer.activation is Activation.RELU:
                h = np.maximum(h, 0.0)
        return h

    def activation_pattern(self, x) -> tuple[np.ndarray, ...]:
        """Boolean relu on/off pattern per layer at a single point."""
        h = np.asarray(x, dtype=float).reshape(1, -1)
        pattern = []
        for layer in self.layers:
            h = h @ layer.weight.T + layer.bias
            pattern.append((h[0] > 0) if layer.activation is Activation.RELU else np.ones(h.shape[1], bool))
            if layer.activation is Activation.RELU:
                h = np.maximum(h, 0.0)
        return tuple(pattern)

    @classmethod
    def identity(cls, n: int) -> "NeuralNetwork":
        return cls((Layer(np.eye(n), np.zeros(n), Activation.IDENTITY),))

    @classmethod
    def affine(cls, A, b) -> "NeuralNetwork":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls((Layer(A, b, Activation.IDENTITY),))

    @classmethod
    def relu_affine(cls, A, b) -> "NeuralNetwork":
        """Exact relu realisation of ``x -> A x + b`` via ``x = relu(x) - relu(-x)``."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[1]
        W1 = np.vstack([np.eye(n), -np.eye(n)])
        W2 = np.hstack([A, -A])
        return cls((Layer(W1, np.zeros(2 * n), Activation.RELU), Layer(W2, b, Activation.IDENTITY)))

    @classmethod
    def random_relu(
        cls, rng: np.random.Generator, dims: Sequence[int], scale: float = 1.0, final_relu: bool = False
    ) -> "NeuralNetwork":
        """Random fully connected relu net with layer sizes ``dims``."""
        layers = []
        for k in range(len(dims) - 1):
            W = scale * rng.standard_normal((dims[k + 1], dims[k])) / np.sqrt(dims[k])
            b = 0.1 * scale * rng.standard_normal(dims[k + 1])
            last = k == len(dims) - 2
            act = Activation.RELU if (not last or final_relu) else Activation.IDENTITY
            layers.append(Layer(W, b, act))
        return cls(tuple(layers))


def evaluate(net: NeuralNetwork, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != net.dim_in:
        raise ArityError(f"input has length {x.shape[0]}, network expects {net.dim_in}")
    return net.forward(x[None, :])[0]


@dataclass(frozen=True, eq=False)
class GaussianNoise:
    variances: np.ndarray

    def __post_init__(self):
        v = np.array(self.variances, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ProblemError("variances must be finite and nonnegative", "noise.variances")
        v.setflags(write=False)
        object.__setattr__(self, "variances", v)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variances)


@dataclass(frozen=True, eq=False)
class ControlStructure:
    g: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray

    def __post_init__(self):
        g = np.atleast_2d(np.array(self.g, dtype=float))
        lo = np.array(self.u_lower, dtype=float).reshape(-1)
        hi = np.array(self.u_upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape or g.shape[1] != lo.shape[0]:
            raise ProblemError("g must be n x c with c-dimensional control bounds", "control")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ProblemError("control set must be bounded", "control")
        if np.any(lo > hi):
            raise ProblemError("u_lower must not exceed u_upper", "control")
        for a in (g, lo, hi):
            a.setflags(write=False)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)

    @property
    def dim(self) -> int:
        return self.u_lower.shape[0]

    @property
    def box(self) -> Box:
        return Box(self.u_lower, self.u_upper)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    network: NeuralNetwork
    noise: GaussianNoise
    safe_set: Box
    initial_set: Box
    state_space: Box
    horizon: int
    threshold: float
    partition_widths: np.ndarray
    barrier_degree: int = 4
    eta_step: float = 0.05
    control: ControlStructure | None = None
    name: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.network.dim_in
        if self.network.dim_out != n:
            raise ProblemError(
                f"closed-loop network must map R^{n} to R^{n}, got output dimension {self.network.dim_out}",
                "network",
            )
        if self.noise.variances.shape[0] != n:
            raise ProblemError(f"expected {n} variances", "noise.variances")
        for name, box in (("sets.safe", self.safe_set), ("sets.initial", self.initial_set), ("sets.state", self.state_space)):
            if box.dim != n:
                raise ProblemError(f"box has dimension {box.dim}, system has {n}", name)
        if not self.safe_set.contains_box(self.initial_set):
            raise ProblemError("initial set must be contained in the safe set", "sets.initial")
        if not self.state_space.contains_box(self.safe_set):
            raise ProblemError("safe set must be contained in the state space", "sets.safe")
        if not isinstance(self.horizon, (int, np.integer)) or self.horizon < 1:
            raise ProblemError("horizon must be a positive integer", "certify.horizon")
        if not 0.0 <= self.threshold <= 1.0:
            raise ProblemError("threshold must lie in [0, 1]", "certify.threshold")
        w = np.array(self.partition_widths, dtype=float).reshape(-1)
        if w.shape[0] != n or np.any(~(w > 0)):
            raise ProblemError("partition widths must be n strictly positive numbers", "certify.partition_widths")
        w.setflags(write=False)
        object.__setattr__(self, "partition_widths", w)
        if self.barrier_degree < 0:
            raise ProblemError("degree must be nonnegative", "certify.degree")
        if not self.eta_step > 0:
            raise ProblemError("eta_step must be positive", "certify.eta_step")
        if self.control is not None and self.control.g.shape[0] != n:
            raise ProblemError(f"g must have {n} rows", "control.g")

    @property
    def dim(self) -> int:
        return self.network.dim_in

    def with_overrides(self, **kwargs) -> "ProblemSpec":
        fields = {f: getattr(self, f) for f in self.__dataclass_fields__}
        fields.update(kwargs)
        return ProblemSpec(**fields)


def step_sample(spec: ProblemSpec, x, u=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """One transition ``f(x) + g u + v`` with ``v ~ N(0, diag(variances))``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    nxt = evaluate(spec.network, x)
    if u is not None:
        if spec.control is None:
            raise ProblemError("control input given but the problem has no control structure", "control")
        u = np.asarray(u, dtype=float).reshape(-1)
        if u.shape[0] != spec.control.dim:
            raise ArityError(f"control has length {u.shape[0]}, expected {spec.control.dim}")
        nxt = nxt + spec.control.g @ u
    if rng is None:
        rng = np.random.default_rng(0)
    std = spec.noise.std
    if np.any(std > 0):
        nxt = nxt + std * rng.standard_normal(x.shape[0])
    return nxt


# --------------------------------------------------------------------------
# problem files
# --------------------------------------------------------------------------


def _get(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise ProblemError("missing required field", f"{where}.{key}" if where else key)
    return d[key]


def _matrix(values, rows: int | None, where: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 1 and rows is not None and rows > 0 and arr.size % rows == 0:
        return arr.reshape(rows, -1)
    raise ProblemError("expected a row-major matrix", where)


def problem_from_dict(doc: dict) -> ProblemSpec:
    if not isinstance(doc, dict):
        raise ProblemError("problem document must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ProblemError(f"unsupported schema_version {version!r}", "schema_version")
    try:
        net_doc = _get(doc, "network", "")
        layers = []
        for k, ld in enumerate(_get(net_doc, "layers", "network")):
            where = f"network.layers[{k}]"
            bias = np.asarray(_get(ld, "bias", where), dtype=float).reshape(-1)
            W = _matrix(_get(ld, "weights", where), bias.shape[0], where + ".weights")
            act = ld.get("activation", "identity")
            if act not in {a.value for a in Activation}:
                raise ProblemError(f"unknown activation {act!r}", where + ".activation")
            try:
                layers.append(Layer(W, bias, Activation(act)))
            except ProblemError as e:
                raise ProblemError(str(e), where) from None
        network = NeuralNetwork(tuple(layers))
        noise = GaussianNoise(_get(_get(doc, "noise", ""), "variances", "noise"))
        sets = _get(doc, "sets", "")

        def box(name):
            b = _get(sets, name, "sets")
            try:
                return Box(_get(b, "lower", f"sets.{name}"), _get(b, "upper", f"sets.{name}"))
            except ValueError as e:
                if isinstance(e, ProblemError):
                    raise
                raise ProblemError(str(e), f"sets.{name}") from None

        cert = _get(doc, "certify", "")
        control = None
        if doc.get("control") is not None:
            c = doc["control"]
            n = network.dim_in
            g = _matrix(_get(c, "g", "control"), n, "control.g")
            control = ControlStructure(g, _get(c, "u_lower", "control"), _get(c, "u_upper", "control"))
        horizon = _get(cert, "horizon", "certify")
        if not isinstance(horizon, int) or isinstance(horizon, bool):
            raise ProblemError("horizon must be an integer", "certify.horizon")
        degree = cert.get("degree", 4)
        if not isinstance(degree, int) or isinstance(degree, bool):
            raise ProblemError("degree must be an integer", "certify.degree")
        return ProblemSpec(
            network=network,
            noise=noise,
            safe_set=box("safe"),
            initial_set=box("initial"),
            state_space=box("state"),
            horizon=horizon,
            threshold=float(_get(cert, "threshold", "certify")),
            partition_widths=_get(cert, "partition_widths", "certify"),
            barrier_degree=degree,
            eta_step=float(cert.get("eta_step", 0.05)),
            control=control,
            name=str(doc.get("name", "")),
        )
    except (TypeError, ValueError) as e:
        if isinstance(e, ProblemError):
            raise
        raise ProblemError(str(e)) from None


def problem_to_dict(spec: ProblemSpec) -> dict[str, Any]:
    doc: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    if spec.name:
        doc["name"] = spec.name
    doc["network"] = {
        "layers": [
            {
                "weights": layer.weight.reshape(-1).tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation.value,
            }
            for layer in spec.network.layers
        ]
    }
    doc["noise"] = {"variances": spec.noise.variances.tolist()}
    doc["sets"] = {
        "state": spec.state_space.to_dict(),
        "safe": spec.safe_set.to_dict(),
        "initial": spec.initial_set.to_dict(),
    }
    doc["certify"] = {
        "horizon": int(spec.horizon),
        "threshold": float(spec.threshold),
        "degree": int(spec.barrier_degree),
        "eta_step": float(spec.eta_step),
        "partition_widths": spec.partition_widths.tolist(),
    }
    if spec.control is not None:
        doc["control"] = {
            "g": spec.control.g.reshape(-1).tolist(),
            "u_lower": spec.control.u_lower.tolist(),
            "u_upper": spec.control.u_upper.tolist(),
        }
    return doc


def load_problem(path: str | Path) -> ProblemSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ProblemError(f"malformed problem file {path}: {e}") from None
    return problem_from_dict(doc)


def save_problem(spec: ProblemSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(problem_to_dict(spec), indent=2) + "\n")
