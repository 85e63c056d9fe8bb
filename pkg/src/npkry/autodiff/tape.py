"""Reverse-mode tape: recorded nodes, variables and gradient accumulation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["Node", "Tape", "Variable"]


@dataclass
class Node:
    id: int
    kind: str
    inputs: tuple
    vjp: Optional[Callable]
    requires_grad: bool


class Variable:
    """Value recorded on a :class:`Tape`.

    ``grad`` is populated by :meth:`Tape.backward` for leaves created with
    ``requires_grad=True``.
    """

    __slots__ = ("tape", "id", "value", "grad", "requires_grad")
    __array_priority__ = 100

    def __init__(self, tape, id, value, requires_grad):
        self.tape = tape
        self.id = id
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self):
        return float(self.value)

    def __repr__(self):
        return f"Variable(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the op functions do the recording
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.divide(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)


class Tape:
    """Append-only record of operations forming a DAG.

    Every node's inputs have strictly smaller ids than the node itself, so a
    single reverse sweep visits nodes in a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaves: dict[int, Variable] = {}
        self._backward_done = False

    def __len__(self):
        return len(self.nodes)

    def _new(self, kind, inputs, value, vjp, requires_grad):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"non-finite value produced by {kind!r}")
        node_id = len(self.nodes)
        for i in inputs:
            if i >= node_id:
                raise RuntimeError("tape inputs must reference earlier nodes")
        self.nodes.append(Node(node_id, kind, tuple(inputs), vjp, requires_grad))
        return Variable(self, node_id, value, requires_grad)

    def leaf(self, value, requires_grad=True) -> Variable:
        var = self._new("leaf", (), np.array(value, dtype=np.float64), None, requires_grad)
        if requires_grad:
            self._leaves[var.id] = var
        return var

    def constant(self, value) -> Variable:
        return self.leaf(value, requires_grad=False)

    def record(self, kind, inputs, value, vjp) -> Variable:
        """Append a node computed from ``inputs`` (Variables on this tape)."""
        requires_grad = any(v.requires_grad for v in inputs)
        return self._new(kind, [v.id for v in inputs], value,
                         vjp if requires_grad else None, requires_grad)

    def backward(self, root: Variable):
        """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every leaf."""
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if root.value.size != 1:
            raise ValueError("backward requires a scalar root")
        if self._backward_done:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        self._backward_done = True
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.pop(node.id, None)
            if g is None or not node.requires_grad:
                continue
            if node.vjp is None:
                leaf = self._leaves.get(node.id)
                if leaf is not None:
                    leaf.grad = g if leaf.grad is None else leaf.grad + g
                continue
            for i, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        for leaf in self._leaves.values():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.value)

    def reset(self):
        """Clear leaf gradients and allow another backward sweep."""
        for leaf in self._leaves.values():
            leaf.grad = None
        self._backward_done = False
