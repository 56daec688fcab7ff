"""Reverse-mode differentiation over dense float64 matrices.

A :class:`Tape` records a static computation graph once (placeholders,
parameters and a closed set of primitives) and can then be evaluated
repeatedly on new inputs. Every value is a 2-D ``float64`` array; scalars
are ``1 x 1``. Parameters are bound *by reference* to arrays owned by the
caller, so an optimizer that updates those arrays in place is seen by the
next :meth:`Tape.forward` without rebuilding the graph.

Example
-------
>>> tape = Tape()
>>> x = tape.input("x", cols=2)
>>> w = tape.parameter("w", np.array([[1.0], [1.0]]))
>>> out = tape.mean(tape.matmul(x, w))
>>> tape.set_output(out)
>>> float(tape.forward({"x": np.array([[1.0, 2.0], [3.0, 4.0]])})[0, 0])
5.0
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import DimensionError, NumericError, TapeStateError

BCE_CLAMP = 1e-12


class ClampWarning(RuntimeWarning):
    """Probabilities were clamped inside a logarithm."""


def as_matrix(value) -> np.ndarray:
    """Coerce scalars, vectors and matrices to a 2-D float64 array.

    Vectors become column matrices.
    """
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("index", "op", "inputs", "name", "requires_grad", "value", "attrs")

    def __init__(self, index, op, inputs=(), name=None, requires_grad=False, attrs=None):
        self.index = index
        self.op = op
        self.inputs = tuple(inputs)
        self.name = name
        self.requires_grad = requires_grad
        self.value = None
        self.attrs = attrs or {}

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node #{self.index} {self.op}{label}>"


def _broadcast_shape(op, a, b):
    if a.shape == b.shape:
        return a.shape
    if a.shape == (1, 1):
        return b.shape
    if b.shape == (1, 1):
        return a.shape
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad, shape):
    # scalar operands receive the summed adjoint
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


def _elu(x):
    # expm1(x) >= x for x <= 0, and expm1(0) = 0 covers x > 0
    return np.maximum(x, np.expm1(np.minimum(x, 0.0)))


class Tape:
    """A static computation graph with cached forward values.

    Nodes are appended in construction order, which is a valid topological
    order because every primitive only accepts existing nodes as operands.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: dict[str, np.ndarray] = {}
        self._param_nodes: dict[str, Node] = {}
        self.output: Node | None = None
        self._last_feed: dict[str, np.ndarray] | None = None
        self._forward_done = False

    # -- graph construction -------------------------------------------------

    def _add(self, op, inputs=(), name=None, requires_grad=None, attrs=None):
        for node in inputs:
            if not isinstance(node, Node) or self.nodes[node.index] is not node:
                raise TapeStateError(f"{op}: operand {node!r} does not belong to this tape")
        if requires_grad is None:
            requires_grad = any(n.requires_grad for n in inputs)
        node = Node(len(self.nodes), op, inputs, name, requires_grad, attrs)
        self.nodes.append(node)
        self._forward_done = False
        return node

    def input(self, name: str, cols: int) -> Node:
        """Declare a placeholder with a fixed column count and any row count."""
        if name in self.inputs or name in self.params:
            raise ValueError(f"duplicate name {name!r}")
        node = self._add("input", name=name, requires_grad=False, attrs={"cols": int(cols)})
        self.inputs[name] = node
        return node

    def parameter(self, name: str, array: np.ndarray) -> Node:
        """Bind a trainable float64 array (2-D) by reference."""
        if name in self.inputs or name in self.params:
            raise ValueError(f"duplicate name {name!r}")
        if not isinstance(array, np.ndarray) or array.dtype != np.float64 or array.ndim != 2:
            raise DimensionError(f"parameter {name!r} must be a 2-D float64 ndarray")
        node = self._add("param", name=name, requires_grad=True)
        self.params[name] = array
        self._param_nodes[name] = node
        return node

    def const(self, value) -> Node:
        return self._add("const", requires_grad=False, attrs={"value": as_matrix(value)})

    def matmul(self, a: Node, b: Node) -> Node:
        return self._add("matmul", (a, b))

    def add_bias(self, a: Node, bias: Node) -> Node:
        """Add a ``1 x k`` row to every row of an ``n x k`` matrix."""
        return self._add("add_bias", (a, bias))

    def elu(self, a: Node) -> Node:
        return self._add("elu", (a,))

    def sigmoid(self, a: Node) -> Node:
        return self._add("sigmoid", (a,))

    def add(self, a: Node, b: Node) -> Node:
        return self._add("add", (a, b))

    def sub(self, a: Node, b: Node) -> Node:
        return self._add("sub", (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product; either operand may be a ``1 x 1`` scalar."""
        return self._add("mul", (a, b))

    def div(self, a: Node, b: Node) -> Node:
        return self._add("div", (a, b))

    def mean(self, a: Node) -> Node:
        return self._add("mean", (a,))

    def squared_error(self, a: Node, b: Node) -> Node:
        """Mean of ``(a - b)**2`` over all entries."""
        return self._add("squared_error", (a, b))

    def bce(self, p: Node, t: Node) -> Node:
        """Mean binary cross-entropy of probabilities ``p`` against labels ``t``."""
        return self._add("bce", (p, t))

    def stop_gradient(self, a: Node) -> Node:
        """Identity in the forward pass, zero adjoint in the backward pass."""
        return self._add("stop_gradient", (a,), requires_grad=False)

    def set_output(self, node: Node) -> None:
        self.output = node
        self._forward_done = False

    # -- evaluation ---------------------------------------------------------

    def _feed(self, inputs) -> dict[str, np.ndarray]:
        if inputs is None:
            if self._last_feed is None and self.inputs:
                raise TapeStateError("no inputs supplied and none cached")
            return self._last_feed or {}
        if not isinstance(inputs, Mapping):
            inputs = list(inputs)
            if len(inputs) != len(self.inputs):
                raise DimensionError(
                    f"expected {len(self.inputs)} inputs, got {len(inputs)}"
                )
            inputs = dict(zip(self.inputs, inputs))
        feed = {}
        for name, node in self.inputs.items():
            if name not in inputs:
                raise DimensionError(f"missing input {name!r}")
            arr = as_matrix(inputs[name])
            if arr.shape[1] != node.attrs["cols"]:
                raise DimensionError(
                    f"input {name!r} has {arr.shape[1]} columns, declared {node.attrs['cols']}"
                )
            feed[name] = arr
        return feed

    def forward(self, inputs=None) -> np.ndarray:
        """Evaluate the graph and return the output node's value.

        ``inputs`` maps placeholder names to arrays; a sequence is matched to
        placeholders in declaration order. ``None`` reuses the previous feed.
        """
        # overflow and division by zero surface as NumericError below
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            return self._forward(inputs)

    def _forward(self, inputs):
        if self.output is None:
            raise TapeStateError("output node not set")
        feed = self._feed(inputs)
        self._last_feed = feed
        self._forward_done = False
        clamped = False
        for node in self.nodes[: self.output.index + 1]:
            op = node.op
            vals = [n.value for n in node.inputs]
            if op == "input":
                v = feed[node.name]
            elif op == "param":
                v = self.params[node.name]
            elif op == "const":
                v = node.attrs["value"]
            elif op == "matmul":
                a, b = vals
                if a.shape[1] != b.shape[0]:
                    raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
                v = a @ b
            elif op == "add_bias":
                a, b = vals
                if b.shape != (1, a.shape[1]):
                    raise DimensionError(f"add_bias: bias {b.shape} for matrix {a.shape}")
                v = a + b
            elif op == "elu":
                v = _elu(vals[0])
            elif op == "sigmoid":
                v = expit(vals[0])
            elif op in ("add", "sub", "mul", "div"):
                a, b = vals
                _broadcast_shape(op, a, b)
                if op == "add":
                    v = a + b
                elif op == "sub":
                    v = a - b
                elif op == "mul":
                    v = a * b
                else:
                    v = a / b
            elif op == "mean":
                v = np.array([[vals[0].mean()]])
            elif op == "squared_error":
                a, b = vals
                if a.shape != b.shape:
                    raise DimensionError(f"squared_error: {a.shape} vs {b.shape}")
                v = np.array([[np.mean((a - b) ** 2)]])
            elif op == "bce":
                p, t = vals
                if p.shape != t.shape:
                    raise DimensionError(f"bce: {p.shape} vs {t.shape}")
                pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
                if np.any(pc != p):
                    clamped = True
                v = np.array([[-np.mean(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))]])
            elif op == "stop_gradient":
                v = vals[0]
            else:  # pragma: no cover
                raise TapeStateError(f"unknown op {op}")
            if op not in ("input", "param", "const") and not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite value produced by {node!r}")
            node.value = v
        if clamped:
            warnings.warn("probabilities clamped inside log", ClampWarning, stacklevel=2)
        self._forward_done = True
        return self.output.value

    def backward(self) -> dict[str, np.ndarray]:
        """Gradients of the scalar output with respect to every parameter."""
        if not self._forward_done:
            raise TapeStateError("backward called before forward")
        out = self.output
        if out.value.shape != (1, 1):
            raise DimensionError(f"backward needs a 1x1 output, got {out.value.shape}")
        adj: dict[int, np.ndarray] = {out.index: np.ones((1, 1))}

        def push(node, g):
            if not node.requires_grad:
                return
            if node.index in adj:
                adj[node.index] = adj[node.index] + g
            else:
                adj[node.index] = g

        for node in reversed(self.nodes[: out.index + 1]):
            g = adj.pop(node.index, None)
            if g is None or node.op in ("input", "param", "const"):
                if node.op == "param" and g is not None:
                    adj[node.index] = g  # kept for collection below
                continue
            op = node.op
            ins = node.inputs
            if op == "matmul":
                a, b = ins
                if a.requires_grad:
                    push(a, g @ b.value.T)
                if b.requires_grad:
                    push(b, a.value.T @ g)
            elif op == "add_bias":
                a, b = ins
                push(a, g)
                if b.requires_grad:
                    push(b, g.sum(axis=0, keepdims=True))
            elif op == "elu":
                # derivative is 1 for x > 0 and exp(x) = elu(x) + 1 otherwise
                push(ins[0], g * (np.minimum(node.value, 0.0) + 1.0))
            elif op == "sigmoid":
                s = node.value
                push(ins[0], g * s * (1.0 - s))
            elif op == "add":
                a, b = ins
                push(a, _unbroadcast(g, a.value.shape))
                push(b, _unbroadcast(g, b.value.shape))
            elif op == "sub":
                a, b = ins
                push(a, _unbroadcast(g, a.value.shape))
                if b.requires_grad:
                    push(b, _unbroadcast(-g, b.value.shape))
            elif op == "mul":
                a, b = ins
                if a.requires_grad:
                    push(a, _unbroadcast(g * b.value, a.value.shape))
                if b.requires_grad:
                    push(b, _unbroadcast(g * a.value, b.value.shape))
            elif op == "div":
                a, b = ins
                if a.requires_grad:
                    push(a, _unbroadcast(g / b.value, a.value.shape))
                if b.requires_grad:
                    push(b, _unbroadcast(-g * a.value / b.value**2, b.value.shape))
            elif op == "mean":
                x = ins[0].value
                push(ins[0], np.full(x.shape, g[0, 0] / x.size))
            elif op == "squared_error":
                a, b = ins
                diff = a.value - b.value
                scale = 2.0 * g[0, 0] / diff.size
                push(a, scale * diff)
                if b.requires_grad:
                    push(b, -scale * diff)
            elif op == "bce":
                p, t = ins
                pv, tv = p.value, t.value
                pc = np.clip(pv, BCE_CLAMP, 1.0 - BCE_CLAMP)
                inside = (pc == pv).astype(np.float64)
                scale = g[0, 0] / pv.size
                push(p, scale * inside * (-tv / pc + (1.0 - tv) / (1.0 - pc)))
                if t.requires_grad:
                    push(t, scale * (-np.log(pc) + np.log1p(-pc)))
            elif op == "stop_gradient":
                pass
        grads = {}
        for name, node in self._param_nodes.items():
            g = adj.get(node.index)
            grads[name] = np.zeros_like(self.params[name]) if g is None else g
        return grads

    def value(self, node: Node) -> np.ndarray:
        """Cached value of ``node`` from the last forward pass."""
        if not self._forward_done or node.value is None:
            raise TapeStateError("forward has not been run")
        return node.value


def forward(tape: Tape, inputs=None) -> np.ndarray:
    return tape.forward(inputs)


def backward(tape: Tape) -> dict[str, np.ndarray]:
    return tape.backward()


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and central-difference gradients."""

    max_rel_error: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(
    tape: Tape,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    inputs=None,
    grad_floor: float = 1e-8,
    params: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences entry by entry.

    Entries where both the analytic and the numeric gradient are below
    ``grad_floor`` in magnitude are treated as agreeing zeros. Parameter
    arrays are perturbed in place and restored exactly afterwards.
    """
    tape.forward(inputs)
    analytic = tape.backward()
    report = GradCheckReport(tolerance=tolerance)
    for name in params if params is not None else tape.params:
        arr = tape.params[name]
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp = tape.forward()[0, 0]
            arr[idx] = orig - step
            fm = tape.forward()[0, 0]
            arr[idx] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[name][idx]
            scale = max(abs(a), abs(numeric))
            if scale <= grad_floor:
                continue
            worst = max(worst, abs(a - numeric) / scale)
        report.max_rel_error[name] = worst
        if worst > tolerance:
            report.flagged.append(name)
    tape.forward()
    return report
