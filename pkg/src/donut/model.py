"""DONUT parameterization: shared representation, two outcome heads,
logistic propensity on raw covariates, and a scalar perturbation ``epsilon``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .diffmath import Node, Tape, as_matrix
from .exceptions import DimensionError


@dataclass(frozen=True)
class ModelConfig:
    """Layer sizes. Defaults: 3 representation layers of width 200 and
    outcome heads with 2 hidden layers of width 100."""

    rep_width: int = 200
    rep_layers: int = 3
    head_width: int = 100
    head_layers: int = 2


@dataclass
class GraphNodes:
    """Tape nodes produced by :meth:`DonutModel.graph`."""

    f0: Node
    f1: Node
    pi: Node
    epsilon: Node


class DonutModel:
    """Parameters are kept as a flat ``name -> 2-D float64 array`` mapping so
    that a tape can bind them by reference and an optimizer can update them
    in place."""

    def __init__(self, d: int, config: ModelConfig = ModelConfig(), params: dict | None = None):
        if d < 1:
            raise ValueError("covariate dimension must be >= 1")
        self.d = int(d)
        self.config = config
        self.params: dict[str, np.ndarray] = {} if params is None else params
        self._eval = None

    # -- construction -------------------------------------------------------

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        c = self.config
        shapes = {}
        fan_in = self.d
        for k in range(c.rep_layers):
            shapes[f"rep{k}.W"] = (fan_in, c.rep_width)
            shapes[f"rep{k}.b"] = (1, c.rep_width)
            fan_in = c.rep_width
        rep_out = fan_in
        for t in (0, 1):
            fan_in = rep_out
            for k in range(c.head_layers):
                shapes[f"head{t}.{k}.W"] = (fan_in, c.head_width)
                shapes[f"head{t}.{k}.b"] = (1, c.head_width)
                fan_in = c.head_width
            shapes[f"head{t}.out.W"] = (fan_in, 1)
            shapes[f"head{t}.out.b"] = (1, 1)
        shapes["prop.w"] = (self.d, 1)
        shapes["prop.b"] = (1, 1)
        shapes["epsilon"] = (1, 1)
        return shapes

    @classmethod
    def init(cls, d: int, seed=0, config: ModelConfig = ModelConfig()) -> "DonutModel":
        """He-normal weights (variance ``2 / fan_in``), zero biases, ``epsilon = 0``."""
        model = cls(d, config)
        rng = np.random.default_rng(seed)
        for name, shape in model.layer_shapes().items():
            if name.endswith(".W") or name == "prop.w":
                model.params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
            else:
                model.params[name] = np.zeros(shape)
        return model

    def copy(self) -> "DonutModel":
        return DonutModel(self.d, self.config, {k: v.copy() for k, v in self.params.items()})

    def load_state(self, params: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place (keeps tape bindings valid)."""
        for name, arr in params.items():
            self.params[name][...] = arr

    @property
    def epsilon(self) -> float:
        return float(self.params["epsilon"][0, 0])

    # -- graph --------------------------------------------------------------

    def graph(self, tape: Tape, x: Node) -> GraphNodes:
        """Wire the model into ``tape`` on covariate node ``x``."""
        p = {name: tape.parameter(name, arr) for name, arr in self.params.items()}
        c = self.config
        h = x
        for k in range(c.rep_layers):
            h = tape.elu(tape.add_bias(tape.matmul(h, p[f"rep{k}.W"]), p[f"rep{k}.b"]))
        heads = []
        for t in (0, 1):
            g = h
            for k in range(c.head_layers):
                g = tape.elu(tape.add_bias(tape.matmul(g, p[f"head{t}.{k}.W"]), p[f"head{t}.{k}.b"]))
            heads.append(tape.add_bias(tape.matmul(g, p[f"head{t}.out.W"]), p[f"head{t}.out.b"]))
        pi = tape.sigmoid(tape.add_bias(tape.matmul(x, p["prop.w"]), p["prop.b"]))
        return GraphNodes(heads[0], heads[1], pi, p["epsilon"])

    def _evaluate(self, X) -> GraphNodes:
        X = as_matrix(X)
        if X.shape[1] != self.d:
            raise DimensionError(f"X has {X.shape[1]} columns, model expects {self.d}")
        if self._eval is None or not self._bound(self._eval[0]):
            tape = Tape()
            nodes = self.graph(tape, tape.input("x", self.d))
            tape.set_output(nodes.pi)
            self._eval = (tape, nodes)
        tape, nodes = self._eval
        tape.forward({"x": X})
        return nodes

    def _bound(self, tape: Tape) -> bool:
        """True if ``tape`` still references this model's parameter arrays."""
        return tape.params.keys() == self.params.keys() and all(
            tape.params[k] is v for k, v in self.params.items()
        )

    def predict(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(f(X,0), f(X,1), pi(X))`` as 1-D arrays."""
        nodes = self._evaluate(X)
        return nodes.f0.value.ravel(), nodes.f1.value.ravel(), nodes.pi.value.ravel()

    # -- persistence ----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "config": asdict(self.config),
            "params": [
                {"name": k, "shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in self.params.items()
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DonutModel":
        params = {
            p["name"]: np.asarray(p["data"], dtype=np.float64).reshape(p["shape"])
            for p in payload["params"]
        }
        model = cls(payload["d"], ModelConfig(**payload["config"]), params)
        expected = model.layer_shapes()
        for name, shape in expected.items():
            if name not in params or params[name].shape != shape:
                raise DimensionError(f"parameter {name!r} missing or mis-shaped")
        return model

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "DonutModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def outcome(model: DonutModel, X, t: int) -> np.ndarray:
    """Expected outcome ``f(X, t)`` under the current parameters."""
    if t not in (0, 1):
        raise ValueError("t must be 0 or 1")
    f0, f1, _ = model.predict(X)
    return f1 if t == 1 else f0


def propensity(model: DonutModel, X) -> np.ndarray:
    """Logistic propensity ``sigmoid(X @ w + b)`` on the raw covariates."""
    return model.predict(X)[2]


def perturbed_outcome(model: DonutModel, X, T, t: int) -> np.ndarray:
    """``f(X, t) + epsilon * (T - pi(X))``."""
    T = np.asarray(T, dtype=np.float64).ravel()
    f0, f1, pi = model.predict(X)
    if T.shape[0] != pi.shape[0]:
        raise DimensionError(f"T has length {T.shape[0]}, X has {pi.shape[0]} rows")
    f = f1 if t == 1 else f0
    return f + model.epsilon * (T - pi)


def init(d: int, seed=0, config: ModelConfig = ModelConfig()) -> DonutModel:
    return DonutModel.init(d, seed, config)
