"""Dense float64 matrices and a small reverse-mode autodiff tape.

Matrices are plain 2-D ``numpy.ndarray`` values of dtype float64. Every op in
this module accepts either raw arrays or :class:`Node` handles. When at least
one operand is a node, the op is recorded on that node's tape and a new node is
returned; otherwise the op is evaluated eagerly and an array is returned.

The op set is deliberately closed: matmul, add, add_bias (row broadcast),
scale, tanh, softmax_cross_entropy and frobenius_norm_sq.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np

from .errors import ContractError, ShapeError

Matrix = np.ndarray
Operand = Union["Node", np.ndarray]


def as_matrix(value: Any) -> Matrix:
    """Coerce ``value`` to a C-contiguous 2-D float64 array."""
    m = np.array(value, dtype=np.float64, order="C")
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


@dataclass(eq=False)
class Node:
    """One recorded operation. Leaves have ``op`` set to ``"leaf"``."""

    tape: "Tape"
    id: int
    op: str
    inputs: tuple[int, ...]
    value: Matrix
    ctx: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


class Tape:
    """Append-only list of nodes in topological (recording) order."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def var(self, value: Any, name: str | None = None) -> Node:
        """Record a leaf holding ``value``."""
        return self._record("leaf", (), as_matrix(value), name=name)

    def _record(self, op: str, inputs: tuple[int, ...], value: Matrix, **ctx) -> Node:
        node = Node(self, len(self.nodes), op, inputs, value, ctx)
        self.nodes.append(node)
        return node

    def __len__(self) -> int:
        return len(self.nodes)


def value(x: Operand) -> Matrix:
    """Forward value of a node or array."""
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs: Operand) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Node):
            if tape is not None and x.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = x.tape
    return tape


def _lift(tape: Tape, x: Operand) -> Node:
    return x if isinstance(x, Node) else tape._record("const", (), as_matrix(x))


def matmul(a: Operand, b: Operand) -> Operand:
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape._record("matmul", (_lift(tape, a).id, _lift(tape, b).id), out)


def add(a: Operand, b: Operand) -> Operand:
    """Elementwise sum of two same-shape matrices."""
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add shape mismatch: {av.shape} + {bv.shape}")
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    return tape._record("add", (_lift(tape, a).id, _lift(tape, b).id), out)


def add_bias(x: Operand, bias: Operand) -> Operand:
    """Add a 1×d row vector to every row of an n×d matrix."""
    xv, bv = value(x), value(bias)
    if bv.ndim != 2 or bv.shape[0] != 1 or xv.shape[1] != bv.shape[1]:
        raise ShapeError(f"add_bias shape mismatch: {xv.shape} + row {bv.shape}")
    out = xv + bv
    tape = _tape_of(x, bias)
    if tape is None:
        return out
    return tape._record("add_bias", (_lift(tape, x).id, _lift(tape, bias).id), out)


def scale(x: Operand, c: float) -> Operand:
    """Multiply by a constant scalar. No gradient flows into ``c``."""
    c = float(c)
    out = value(x) * c
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("scale", (x.id,), out, c=c)


def tanh(x: Operand) -> Operand:
    out = np.tanh(value(x))
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape._record("tanh", (x.id,), out)


def _log_softmax(z: Matrix) -> Matrix:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: Matrix) -> Matrix:
    """Row-wise softmax (not recorded; used for scoring)."""
    return np.exp(_log_softmax(value(z)))


def softmax_cross_entropy(logits: Operand, labels: Sequence[int]) -> Operand:
    """Mean softmax cross-entropy over the batch, as a 1×1 matrix."""
    z = value(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {y.shape[0]} labels")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ContractError(f"labels must lie in [0, {z.shape[1]})")
    if y.size == 0:
        raise ContractError("empty batch")
    logp = _log_softmax(z)
    out = np.array([[-logp[np.arange(y.size), y].mean()]])
    tape = _tape_of(logits)
    if tape is None:
        return out
    return tape._record("softmax_xent", (logits.id,), out, labels=y, probs=np.exp(logp))


def frobenius_norm_sq(m: Operand) -> Operand:
    """Sum of squared entries, as a 1×1 matrix."""
    mv = value(m)
    out = np.array([[float(np.sum(mv * mv))]])
    tape = _tape_of(m)
    if tape is None:
        return out
    return tape._record("frob_sq", (m.id,), out)


def batch_variance(x: Operand) -> float:
    """Population variance over every entry of a batch activation matrix."""
    xv = value(x)
    if xv.size == 0:
        raise ContractError("batch_variance of an empty matrix")
    return float(np.var(xv))


def _input_grads(node: Node, g: Matrix, nodes: list[Node]) -> list[Matrix]:
    op = node.op
    if op == "matmul":
        a, b = (nodes[i].value for i in node.inputs)
        return [g @ b.T, a.T @ g]
    if op == "add":
        return [g, g]
    if op == "add_bias":
        return [g, g.sum(axis=0, keepdims=True)]
    if op == "scale":
        return [g * node.ctx["c"]]
    if op == "tanh":
        return [g * (1.0 - node.value * node.value)]
    if op == "softmax_xent":
        y = node.ctx["labels"]
        d = node.ctx["probs"].copy()
        d[np.arange(y.size), y] -= 1.0
        return [d * (g[0, 0] / y.size)]
    if op == "frob_sq":
        return [2.0 * nodes[node.inputs[0]].value * g[0, 0]]
    raise ContractError(f"no gradient rule for op {op!r}")


def backward(tape: Tape, loss: Node) -> dict[int, Matrix]:
    """Reverse-mode sweep from a scalar node.

    Returns:
        Mapping from node id to dL/d(node) for every node the loss depends on.
    """
    if loss.tape is not tape:
        raise ContractError("loss node is not on this tape")
    if loss.value.shape != (1, 1):
        raise ContractError(f"loss must be 1×1, got {loss.value.shape}")
    nodes = tape.nodes
    grads: dict[int, Matrix] = {loss.id: np.ones((1, 1))}
    for node in reversed(nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or not node.inputs:
            continue
        for i, gi in zip(node.inputs, _input_grads(node, g, nodes)):
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return grads
