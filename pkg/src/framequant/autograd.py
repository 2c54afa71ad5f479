"""Minimal reverse-mode autodiff with straight-through-estimator nodes.

The op set is intentionally small: exactly what is needed to train
clipping bounds and the toy multi-frame models. Data gradients through
``ste_fakequant`` use the clipped straight-through surrogate (identity
strictly inside (lb, ub), zero outside); bound gradients accumulate the
upstream adjoint over the elements clamped at that bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quantize import _fq_values

__all__ = [
    "TrainableParam",
    "Node",
    "Graph",
    "GradcheckReport",
    "forward",
    "backward",
    "sgd_step",
    "gradcheck",
    "softmax_values",
]

_EPS = np.finfo(np.float64).eps

ROLES = ("weight", "bound_lb", "bound_ub")


@dataclass
class TrainableParam:
    """A named learnable value with its accumulated gradient."""

    name: str
    value: np.ndarray
    role: str = "weight"
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


class Node:
    __slots__ = ("kind", "parents", "payload", "value", "grad", "index")

    def __init__(self, kind, parents=(), payload=None, index=0):
        self.kind = kind
        self.parents = tuple(parents)
        self.payload = payload or {}
        self.value: np.ndarray | None = None
        self.grad: np.ndarray | None = None
        self.index = index

    def __repr__(self):
        return f"Node#{self.index}({self.kind})"


def softmax_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _reduce_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast axes so ``g`` matches ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _bound_bshape(data: np.ndarray, frame_axis: int | None) -> tuple[int, ...]:
    if frame_axis is None:
        return (1,) * data.ndim
    return tuple(
        data.shape[ax] if ax == frame_axis else 1 for ax in range(data.ndim)
    )


class Graph:
    """An acyclic computation graph; node creation order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: list[TrainableParam] = []

    def _register(self, node: Node) -> Node:
        node.index = len(self.nodes)
        self.nodes.append(node)
        return node

    # -- leaf nodes ------------------------------------------------------

    def input(self, name: str, value=None) -> Node:
        if name in self.inputs:
            raise ValueError(f"duplicate input name {name!r}")
        node = self._register(Node("input", payload={"name": name}))
        if value is not None:
            node.value = np.asarray(value, dtype=np.float64)
        self.inputs[name] = node
        return node

    def constant(self, value) -> Node:
        node = self._register(Node("constant"))
        node.value = np.asarray(value, dtype=np.float64)
        return node

    def param(self, p: TrainableParam) -> Node:
        if p not in self.params:
            self.params.append(p)
        return self._register(Node("param", payload={"param": p}))

    # -- ops ---------------------------------------------------------------

    def add(self, a: Node, b: Node) -> Node:
        return self._register(Node("add", (a, b)))

    def mul(self, a: Node, b: Node) -> Node:
        return self._register(Node("mul", (a, b)))

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        return self._register(
            Node("matmul", (a, b), payload={"transpose_b": transpose_b})
        )

    def relu(self, a: Node) -> Node:
        return self._register(Node("relu", (a,)))

    def softmax(self, a: Node) -> Node:
        return self._register(Node("softmax", (a,)))

    def ste_fakequant(
        self, data: Node, lb: Node, ub: Node, bits: int, frame_axis: int | None = None
    ) -> Node:
        if bits < 1:
            raise ValueError("bits must be >= 1")
        return self._register(
            Node(
                "ste_fakequant",
                (data, lb, ub),
                payload={"bits": bits, "frame_axis": frame_axis},
            )
        )

    def mse_loss(self, a: Node, b: Node) -> Node:
        return self._register(Node("mse_loss", (a, b)))

    def scalar_combine(self, nodes, weights) -> Node:
        weights = tuple(float(w) for w in weights)
        nodes = tuple(nodes)
        if len(nodes) != len(weights):
            raise ValueError("nodes and weights must have equal length")
        if not nodes:
            raise ValueError("scalar_combine needs at least one operand")
        return self._register(
            Node("scalar_combine", nodes, payload={"weights": weights})
        )

    # -- evaluation ----------------------------------------------------------

    def _eval_node(self, node: Node) -> np.ndarray:
        kind = node.kind
        vals = [p.value for p in node.parents]
        if kind == "input":
            if node.value is None:
                raise ValueError(f"unbound input {node.payload['name']!r}")
            return node.value
        if kind == "constant":
            return node.value
        if kind == "param":
            return np.asarray(node.payload["param"].value, dtype=np.float64)
        if kind in ("add", "mul"):
            a, b = vals
            if a.shape != b.shape:
                raise ValueError(
                    f"{node}: shape mismatch {a.shape} vs {b.shape}"
                )
            return a + b if kind == "add" else a * b
        if kind == "matmul":
            a, b = vals
            bt = np.swapaxes(b, -1, -2) if node.payload["transpose_b"] else b
            try:
                return np.matmul(a, bt)
            except ValueError as exc:
                raise ValueError(f"{node}: {exc}") from None
        if kind == "relu":
            return np.maximum(vals[0], 0.0)
        if kind == "softmax":
            return softmax_values(vals[0])
        if kind == "ste_fakequant":
            data, lb, ub = vals
            bshape = _bound_bshape(data, node.payload["frame_axis"])
            if lb.size != int(np.prod(bshape)) or ub.size != lb.size:
                raise ValueError(
                    f"{node}: bound size {lb.size} does not match "
                    f"frame layout {bshape}"
                )
            return _fq_values(
                data, lb.reshape(bshape), ub.reshape(bshape), node.payload["bits"]
            )
        if kind == "mse_loss":
            a, b = vals
            if a.shape != b.shape:
                raise ValueError(
                    f"{node}: shape mismatch {a.shape} vs {b.shape}"
                )
            d = a - b
            return np.asarray(np.mean(d * d))
        if kind == "scalar_combine":
            total = np.float64(0.0)
            for w, v in zip(node.payload["weights"], vals):
                if v.size != 1:
                    raise ValueError(f"{node}: operand is not scalar")
                total = total + w * np.float64(v)
            return np.asarray(total)
        raise ValueError(f"unknown op kind {kind!r}")

    def forward(self, inputs: dict | None = None) -> None:
        """Evaluate the graph.

        With ``inputs`` given, (re)binds input nodes by name and recomputes
        everything; otherwise computes only nodes without cached values.
        """
        full = inputs is not None
        if full:
            for name, value in inputs.items():
                if name not in self.inputs:
                    raise ValueError(f"unknown input {name!r}")
                self.inputs[name].value = np.asarray(value, dtype=np.float64)
        for node in self.nodes:
            if full or node.value is None:
                if node.kind == "input" and node.value is not None:
                    continue
                node.value = self._eval_node(node)

    def recompute(self) -> None:
        """Re-evaluate every non-leaf node (used after param updates)."""
        for node in self.nodes:
            if node.kind != "input":
                node.value = self._eval_node(node)

    # -- differentiation ---------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Reverse-mode adjoints from a scalar loss into node and param grads."""
        if loss.value is None:
            raise ValueError("run forward before backward")
        if np.asarray(loss.value).size != 1:
            raise ValueError("loss must be scalar")
        for node in self.nodes:
            node.grad = None
        for p in self.params:
            p.grad = np.zeros_like(p.value)
        loss.grad = np.ones_like(np.asarray(loss.value, dtype=np.float64))

        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None:
                continue
            self._accumulate_parent_grads(node)
            if node.kind == "param":
                p = node.payload["param"]
                p.grad = p.grad + node.grad.reshape(p.value.shape)

    def _accumulate_parent_grads(self, node: Node) -> None:
        kind = node.kind
        g = node.grad
        if kind in ("input", "constant", "param"):
            return
        parents = node.parents
        vals = [p.value for p in parents]

        def send(parent: Node, grad: np.ndarray) -> None:
            grad = np.asarray(grad, dtype=np.float64)
            if parent.grad is None:
                parent.grad = grad.copy()
            else:
                parent.grad = parent.grad + grad

        if kind == "add":
            send(parents[0], g)
            send(parents[1], g)
        elif kind == "mul":
            send(parents[0], g * vals[1])
            send(parents[1], g * vals[0])
        elif kind == "matmul":
            a, b = vals
            if node.payload["transpose_b"]:
                da = np.matmul(g, b)
                db = np.matmul(np.swapaxes(g, -1, -2), a)
            else:
                da = np.matmul(g, np.swapaxes(b, -1, -2))
                db = np.matmul(np.swapaxes(a, -1, -2), g)
            send(parents[0], _reduce_to_shape(da, a.shape))
            send(parents[1], _reduce_to_shape(db, b.shape))
        elif kind == "relu":
            send(parents[0], g * (vals[0] > 0.0))
        elif kind == "softmax":
            y = node.value
            dot = np.sum(g * y, axis=-1, keepdims=True)
            send(parents[0], (g - dot) * y)
        elif kind == "ste_fakequant":
            data, lb, ub = vals
            bshape = _bound_bshape(data, node.payload["frame_axis"])
            lb_b = lb.reshape(bshape)
            ub_b = ub.reshape(bshape)
            inside = (data > lb_b) & (data < ub_b)
            send(parents[0], g * inside)
            axes = tuple(
                ax for ax in range(data.ndim) if bshape[ax] == 1
            )
            d_lb = np.sum(g * (data <= lb_b), axis=axes)
            d_ub = np.sum(g * (data >= ub_b), axis=axes)
            send(parents[1], d_lb.reshape(lb.shape))
            send(parents[2], d_ub.reshape(ub.shape))
        elif kind == "mse_loss":
            a, b = vals
            scale = 2.0 / a.size
            d = (a - b) * (scale * np.float64(g))
            send(parents[0], d)
            send(parents[1], -d)
        elif kind == "scalar_combine":
            for w, parent in zip(node.payload["weights"], parents):
                send(parent, np.full_like(parent.value, w * np.float64(g)))
        else:
            raise ValueError(f"unknown op kind {kind!r}")

    # -- reachability (for gradcheck) ---------------------------------------

    def _descendants(self, roots: set[Node]) -> set[Node]:
        out = set(roots)
        for node in self.nodes:
            if any(p in out for p in node.parents):
                out.add(node)
        return out

    def _ancestors(self, node: Node) -> set[Node]:
        out = {node}
        for cand in reversed(self.nodes[: node.index + 1]):
            if cand in out:
                out.update(cand.parents)
        return out


def forward(graph: Graph, inputs: dict | None = None):
    """Evaluate the graph; returns the value of its final node."""
    graph.forward(inputs)
    return graph.nodes[-1].value if graph.nodes else None


def backward(graph: Graph, loss: Node) -> None:
    graph.backward(loss)


def sgd_step(params, lr: float):
    """value <- value - lr * grad, then re-separate any (lb, ub) bound pairs.

    Bound params pair up by name prefix: ``<base>:lb`` with ``<base>:ub``.
    After the update, ub is pushed up so that ub - lb >= 10*eps*|ub|.
    """
    for p in params:
        p.value = p.value - lr * p.grad

    lbs = {p.name[: -len(":lb")]: p for p in params if p.role == "bound_lb"}
    ubs = {p.name[: -len(":ub")]: p for p in params if p.role == "bound_ub"}
    for base, lo in lbs.items():
        hi = ubs.get(base)
        if hi is None:
            continue
        # Scaling by both magnitudes keeps lb + sep representable (> lb)
        # even when |lb| dominates |ub|; the 16x factor leaves margin so the
        # post-projection gap still satisfies ub - lb >= 10*eps*|ub|.
        sep = 16.0 * _EPS * np.maximum(np.abs(hi.value), np.abs(lo.value))
        sep = np.where(sep > 0.0, sep, 16.0 * _EPS)
        hi.value = np.maximum(hi.value, lo.value + sep)
    return params


@dataclass(frozen=True)
class GradcheckReport:
    checkable: bool
    passed: bool
    max_rel_error: float
    message: str = ""


def gradcheck(
    graph: Graph,
    param: TrainableParam,
    h: float = 1e-5,
    tol: float = 1e-4,
    loss: Node | None = None,
) -> GradcheckReport:
    """Compare analytic gradients against central finite differences.

    A path through ``ste_fakequant`` is reported as not checkable (the true
    function is piecewise constant there), never as a failure.
    """
    if loss is None:
        loss = graph.nodes[-1]
    if np.asarray(loss.value if loss.value is not None else 0.0).size != 1:
        raise ValueError("loss must be scalar")

    param_nodes = {
        n for n in graph.nodes if n.kind == "param" and n.payload["param"] is param
    }
    if not param_nodes:
        raise ValueError(f"param {param.name!r} is not used in this graph")
    on_path = graph._descendants(param_nodes) & graph._ancestors(loss)
    if any(n.kind == "ste_fakequant" for n in on_path):
        return GradcheckReport(
            checkable=False,
            passed=True,
            max_rel_error=float("nan"),
            message="not checkable: STE surrogate",
        )

    graph.recompute()
    graph.backward(loss)
    analytic = param.grad.copy()

    flat = param.value.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        graph.recompute()
        hi = float(loss.value)
        flat[i] = orig - h
        graph.recompute()
        lo = float(loss.value)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    graph.recompute()

    num = numeric.reshape(param.value.shape)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-6)
    max_rel = float(np.max(np.abs(analytic - num) / denom))
    return GradcheckReport(
        checkable=True,
        passed=max_rel <= tol,
        max_rel_error=max_rel,
    )
