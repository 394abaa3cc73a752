"""Tape-based reverse-mode differentiation over numpy float64 arrays.

A ``Var`` wraps an array. Operations whose inputs require gradients append a
node to the owning ``Tape``; creation order is a valid topological order, so
``Tape.backward`` simply walks the node list in reverse.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class Var:
    __slots__ = ("value", "grad", "tape", "parents", "backward_fn", "name")

    def __init__(self, value, tape: "Tape | None" = None, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.parents: tuple[Var, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the actual primitives live in ops
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
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


class Tape:
    """Records the forward pass; one tape per loss evaluation."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(np.array(value, dtype=DTYPE), tape=self, name=name)
        self.leaves.append(v)
        return v

    def record(self, value: np.ndarray, parents: Sequence[Var], backward_fn) -> Var:
        out = Var(value, tape=self)
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        self.nodes.append(out)
        return out

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Populate ``.grad`` on every leaf and return gradients keyed by leaf name.

        Leaves that the loss does not depend on receive zero gradients.
        """
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        for node in self.nodes:
            node.grad = None
        for leaf in self.leaves:
            leaf.grad = np.zeros_like(leaf.value)
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=DTYPE)
                else:
                    parent.grad = parent.grad + g
        return {leaf.name: leaf.grad for leaf in self.leaves if leaf.name is not None}


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    return tape.backward(loss)


def make(value: np.ndarray, parents: Sequence, backward_fn) -> Var:
    """Wrap an op result, recording a node only if some parent needs gradients."""
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Var(value)
    return tape.record(value, parents, backward_fn)
