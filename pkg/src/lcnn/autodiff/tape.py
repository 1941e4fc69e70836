"""Tensor values and the recording tape.

A :class:`Tape` is an append-only list of nodes.  Node ids increase in
creation order, so the tape is already a topological order and reverse-mode
differentiation is a single backwards sweep over it.  Backward rules are
written in terms of ordinary tensor operations; when ``create_graph=True``
those operations are themselves recorded, which gives gradients of
gradients (Hessian-vector products, gradient-norm penalties).
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from lcnn.autodiff.errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


class Op:
    """A differentiable primitive.

    ``forward`` maps numpy arrays to a numpy array.  ``backward`` receives the
    node and the upstream gradient (a :class:`Tensor`) and returns one
    gradient Tensor (or None) per input, built from tensor operations.
    """

    name = "op"

    @staticmethod
    def forward(*arrays, **attrs) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(node: "Node", g: "Tensor") -> tuple:
        raise NotImplementedError


class Leaf(Op):
    name = "leaf"


@dataclass(eq=False)
class Node:
    op: type[Op]
    inputs: tuple["Tensor", ...]
    attrs: dict[str, Any]
    out: "Tensor | None" = None

    @property
    def parents(self) -> tuple[int | None, ...]:
        return tuple(t.node for t in self.inputs)


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    # node ids of ``wrt`` arguments that did not reach the output in the last
    # gradient() call; their gradient was returned as zeros
    disconnected: list[int] = field(default_factory=list)
    _recording: bool = True
    _watched: dict[int, "Tensor"] = field(default_factory=dict)

    def watch(self, value) -> "Tensor":
        """Register ``value`` as a differentiable leaf.

        Objects exposing ``.value`` (model parameters) are cached by identity,
        so repeated calls within one invocation return the same leaf.
        """
        key = id(value)
        if hasattr(value, "value"):
            if key in self._watched:
                return self._watched[key]
            data = value.value
        elif isinstance(value, Tensor):
            data = value.data
        else:
            data = value
        t = Tensor(np.array(data, dtype=np.float64), tape=self)
        node = Node(Leaf, (), {})
        t.node = len(self.nodes)
        node.out = t
        self.nodes.append(node)
        if hasattr(value, "value"):
            self._watched[key] = t
        return t

    @contextlib.contextmanager
    def paused(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def forward(self, fn: Callable[..., "Tensor"], *inputs) -> tuple["Tensor", list["Tensor"]]:
        """Evaluate ``fn`` on fresh leaves for ``inputs``; returns (output, leaves)."""
        leaves = [self.watch(x) for x in inputs]
        return fn(*leaves), leaves

    def _record(self, op, inputs, attrs, data) -> "Tensor":
        out = Tensor(data, tape=self)
        out.node = len(self.nodes)
        self.nodes.append(Node(op, inputs, attrs, out))
        return out

    def gradient(self, output: "Tensor", wrt, create_graph: bool = False, grad_output=None):
        """Reverse-mode gradient of ``output`` with respect to ``wrt``.

        ``wrt`` may be a single Tensor or a sequence.  ``output`` must be a
        scalar unless ``grad_output`` supplies the upstream cotangent.
        """
        single = isinstance(wrt, Tensor)
        targets = [wrt] if single else list(wrt)
        for t in targets:
            if t.tape is not self or t.node is None:
                raise ValueError("gradient target is not recorded on this tape")
        if grad_output is None:
            if output.data.size != 1:
                raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
            seed = Tensor(np.ones_like(output.data))
        else:
            seed = grad_output if isinstance(grad_output, Tensor) else Tensor(grad_output)
            if seed.shape != output.shape:
                raise ShapeError("grad_output shape differs from output shape")

        self.disconnected = []
        if output.tape is not self or output.node is None:
            results = {t.node: None for t in targets}
        else:
            results = self._sweep(output, seed, {t.node for t in targets}, create_graph)

        out = []
        for t in targets:
            g = results.get(t.node)
            if g is None:
                self.disconnected.append(t.node)
                logger.debug("node %d does not reach the output; gradient is zero", t.node)
                g = Tensor(np.zeros_like(t.data))
            out.append(g)
        return out[0] if single else out

    def _sweep(self, output, seed, wanted, create_graph):
        stop = output.node + 1
        lo = min(wanted)
        live = np.zeros(stop, dtype=bool)
        for i in wanted:
            if i < stop:
                live[i] = True
        for i in range(lo, stop):
            if not live[i]:
                live[i] = any(p is not None and live[p] for p in self.nodes[i].parents)
        if not live[output.node]:
            return {}

        grads: dict[int, Tensor] = {output.node: seed}
        results: dict[int, Tensor] = {}
        ctx = contextlib.nullcontext() if create_graph else self.paused()
        with ctx:
            for i in range(output.node, lo - 1, -1):
                g = grads.pop(i, None)
                if g is None:
                    continue
                if i in wanted:
                    results[i] = g
                node = self.nodes[i]
                if node.op is Leaf:
                    continue
                in_grads = node.op.backward(node, g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None or inp.node is None or inp.tape is not self:
                        continue
                    if not live[inp.node]:
                        continue
                    prev = grads.get(inp.node)
                    grads[inp.node] = ig if prev is None else prev + ig
        return results

    def hvp(self, output: "Tensor", wrt: "Tensor", v) -> "Tensor":
        """Hessian-vector product as the gradient of <grad(output), v>."""
        v = v if isinstance(v, Tensor) else Tensor(v)
        if v.shape != wrt.shape:
            raise ShapeError(f"hvp vector shape {v.shape} differs from {wrt.shape}")
        g = self.gradient(output, wrt, create_graph=True)
        from lcnn.autodiff import ops

        return self.gradient(ops.sum(g * v), wrt)

    def replay(self, feeds: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every recorded node forward; returns the value of each node."""
        feeds = feeds or {}
        values: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op is Leaf:
                values.append(np.asarray(feeds.get(i, node.out.data), dtype=np.float64))
                continue
            args = [values[t.node] if t.node is not None and t.tape is self else t.data
                    for t in node.inputs]
            values.append(node.op.forward(*args, **node.attrs))
        return values


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar; the primitives live in ops
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __pow__(self, p):
        return _ops().power(self, p)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    @property
    def T(self):
        return _ops().transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return _ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis=axis, keepdims=keepdims)


def _ops():
    from lcnn.autodiff import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply(op: type[Op], *inputs, **attrs) -> Tensor:
    """Run ``op`` forward and record it on the inputs' tape if one is recording."""
    tensors = tuple(as_tensor(x) for x in inputs)
    tape = None
    for t in tensors:
        if t.tape is not None and t.node is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    try:
        # overflow surfaces below as NonFiniteError, not as a warning
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            data = op.forward(*(t.data for t in tensors), **attrs)
    except ValueError as exc:
        if isinstance(exc, ShapeError):
            raise
        raise ShapeError(f"{op.name}: {exc}") from exc
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op.name} produced a non-finite value")
    if tape is not None and tape._recording:
        return tape._record(op, tensors, attrs, data)
    return Tensor(data)


def gradient(tape: Tape, output: Tensor, wrt, create_graph: bool = False):
    return tape.gradient(output, wrt, create_graph=create_graph)


def hvp(tape: Tape, output: Tensor, wrt: Tensor, v) -> Tensor:
    return tape.hvp(output, wrt, v)


def forward(tape: Tape, fn: Callable[..., Tensor], *inputs: Sequence) -> Tensor:
    out, _ = tape.forward(fn, *inputs)
    return out
