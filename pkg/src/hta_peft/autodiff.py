"""Tape-based reverse-mode autodiff over numpy arrays.

A :class:`Tape` records primitive applications eagerly; :meth:`Tape.backward`
walks the tape once in reverse.  Only nodes downstream of a trainable leaf
carry gradients, so frozen weights never get a gradient buffer.

    t = Tape()
    w = t.param("w", np.ones(3))
    x = t.const(np.arange(3.0))
    loss = t.sum(t.diag_scale(x, w))
    grads = t.backward(loss)        # {"w": array([0., 1., 2.])}
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from . import _kernels
from .adapters import gelu_and_tanh
from .linalg import NonFiniteError, ShapeError, finite_diff_grad

@dataclass(eq=False)
class Node:
    id: int
    op: str
    value: np.ndarray
    inputs: tuple = ()
    saved: Any = None
    requires_grad: bool = False
    name: Optional[str] = None

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape)))) if g.ndim > len(shape) else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# --------------------------------------------------------------------------
# primitives: forward(*values, **payload) -> (out, saved)
#             backward(g, saved, values, payload) -> tuple of input grads
# --------------------------------------------------------------------------


def _matmul_fwd(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    return a @ b, None


def _matmul_bwd(g, saved, vals, payload, needs):
    a, b = vals
    ga = _unbroadcast(g @ _swap(b), a.shape) if needs[0] else None
    if not needs[1]:
        return ga, None
    if b.ndim == 2 and a.ndim > 2:
        # fold leading dims instead of a batched matmul followed by a sum
        gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    else:
        gb = _unbroadcast(_swap(a) @ g, b.shape)
    return ga, gb


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op} shapes {a.shape} and {b.shape} do not broadcast") from None


def _add_fwd(a, b):
    _broadcast_check(a, b, "add")
    return a + b, None


def _add_bwd(g, saved, vals, payload, needs):
    return (_unbroadcast(g, vals[0].shape) if needs[0] else None,
            _unbroadcast(g, vals[1].shape) if needs[1] else None)


def _mul_fwd(a, b):
    _broadcast_check(a, b, "mul")
    return a * b, None


def _mul_bwd(g, saved, vals, payload, needs):
    a, b = vals
    return (_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None)


def _scale_fwd(a, *, c):
    return a * c, None


def _scale_bwd(g, saved, vals, payload, needs):
    return (g * payload["c"],)


def _householder_fwd(x, v):
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"householder apply shapes {x.shape} and {v.shape}")
    s = x @ v
    return x - s[..., None] * v, s


def _householder_bwd(g, s, vals, payload, needs):
    # y = x - (x.v) v^T  =>  dx = g - (g.v) v^T ; dv = -(x^T (g.v) + g^T (x.v))
    x, v = vals
    gv = g @ v
    gx = g - gv[..., None] * v
    if not needs[1]:
        return gx, None
    xf = x.reshape(-1, v.shape[0])
    gf = g.reshape(-1, v.shape[0])
    gvec = -(xf.T @ gv.reshape(-1) + gf.T @ s.reshape(-1))
    return gx, gvec


def _diag_scale_fwd(x, d):
    if d.ndim != 1 or x.shape[-1] != d.shape[0]:
        raise ShapeError(f"diag_scale shapes {x.shape} and {d.shape}")
    return x * d, None


def _diag_scale_bwd(g, saved, vals, payload, needs):
    x, d = vals
    gd = (g * x).reshape(-1, d.shape[0]).sum(axis=0) if needs[1] else None
    return g * d, gd


def _layernorm_fwd(x, gamma, beta, *, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layernorm_bwd(g, saved, vals, payload, needs):
    xhat, inv = saved
    gamma = vals[1]
    gh = g * gamma
    n = xhat.shape[-1]
    gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    if not (needs[1] or needs[2]):
        return gx, None, None
    lead = xhat.reshape(-1, n)
    gf = g.reshape(-1, n)
    return gx, (gf * lead).sum(axis=0), gf.sum(axis=0)


def _softmax_fwd(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(g, y, vals, payload, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _gelu_fwd(x):
    return gelu_and_tanh(x)


def _gelu_bwd(g, t, vals, payload, needs):
    x = vals[0]
    out = np.empty(x.shape)
    _kernels.gelu_backward(
        np.ascontiguousarray(g).reshape(-1), np.ascontiguousarray(x).reshape(-1), t.reshape(-1), out.reshape(-1)
    )
    return (out,)


def _relu_fwd(x):
    return np.maximum(x, 0.0), None


def _relu_bwd(g, saved, vals, payload, needs):
    return (g * (vals[0] > 0),)


def _cross_entropy_fwd(logits, *, labels):
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy needs (N, C) logits and (N,) labels, got {logits.shape}, {labels.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    return np.asarray(loss), logp


def _cross_entropy_bwd(g, logp, vals, payload, needs):
    labels = payload["labels"]
    n = logp.shape[0]
    p = np.exp(logp)
    p[np.arange(n), labels] -= 1.0
    return (g * p / n,)


def _mean_fwd(x):
    return np.asarray(x.mean()), None


def _mean_bwd(g, saved, vals, payload, needs):
    x = vals[0]
    return (np.full(x.shape, g / x.size),)


def _sum_fwd(x):
    return np.asarray(x.sum()), None


def _sum_bwd(g, saved, vals, payload, needs):
    return (np.full(vals[0].shape, float(g)),)


def _reshape_fwd(x, *, shape):
    return x.reshape(shape), None


def _reshape_bwd(g, saved, vals, payload, needs):
    return (g.reshape(vals[0].shape),)


def _transpose_fwd(x, *, axes):
    return np.transpose(x, axes), None


def _transpose_bwd(g, saved, vals, payload, needs):
    return (np.transpose(g, np.argsort(payload["axes"])),)


def _select_fwd(x, *, index):
    return x[index], None


def _select_bwd(g, saved, vals, payload, needs):
    out = np.zeros_like(vals[0])
    out[payload["index"]] = g
    return (out,)


def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis), None


def _concat_bwd(g, saved, vals, payload, needs):
    bounds = np.cumsum([v.shape[payload["axis"]] for v in vals])[:-1]
    return tuple(np.split(g, bounds, axis=payload["axis"]))


PRIMITIVES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "rank1_householder_apply": (_householder_fwd, _householder_bwd),
    "diag_scale": (_diag_scale_fwd, _diag_scale_bwd),
    "layernorm": (_layernorm_fwd, _layernorm_bwd),
    "softmax": (_softmax_fwd, _softmax_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "relu": (_relu_fwd, _relu_bwd),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "reshape": (_reshape_fwd, _reshape_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    "select": (_select_fwd, _select_bwd),
    "concat": (_concat_fwd, _concat_bwd),
}


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.trainable: dict[str, int] = {}

    # leaves ---------------------------------------------------------------

    def _leaf(self, op: str, value, requires_grad: bool, name=None) -> Node:
        node = Node(len(self.nodes), op, np.asarray(value, dtype=np.float64), requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        """Register a trainable leaf (gradients are returned under ``name``)."""
        if name in self.trainable:
            raise ValueError(f"parameter {name!r} registered twice")
        node = self._leaf("param", value, True, name)
        self.trainable[name] = node.id
        return node

    def const(self, value) -> Node:
        return self._leaf("const", value, False)

    # recording -------------------------------------------------------------

    def record(self, op: str, *inputs: Node, **payload) -> Node:
        fwd, _ = PRIMITIVES[op]
        for n in inputs:
            if n.id >= len(self.nodes) or self.nodes[n.id] is not n:
                raise ValueError("input node does not belong to this tape")
        out, saved = fwd(*(n.value for n in inputs), **payload)
        node = Node(
            len(self.nodes),
            op,
            out,
            inputs=inputs,
            saved=(saved, payload),
            requires_grad=any(n.requires_grad for n in inputs),
        )
        self.nodes.append(node)
        return node

    def matmul(self, a, b):
        return self.record("matmul", a, b)

    def add(self, a, b):
        return self.record("add", a, b)

    def mul(self, a, b):
        return self.record("mul", a, b)

    def scale(self, a, c: float):
        return self.record("scale", a, c=c)

    def householder(self, x, v):
        """``x @ (I - v v^T)`` over the last axis."""
        return self.record("rank1_householder_apply", x, v)

    def diag_scale(self, x, d):
        return self.record("diag_scale", x, d)

    def layernorm(self, x, gamma, beta, eps: float = 1e-6):
        return self.record("layernorm", x, gamma, beta, eps=eps)

    def softmax(self, x):
        return self.record("softmax", x)

    def gelu(self, x):
        return self.record("gelu", x)

    def relu(self, x):
        return self.record("relu", x)

    def cross_entropy(self, logits, labels):
        return self.record("cross_entropy", logits, labels=np.asarray(labels))

    def mean(self, x):
        return self.record("mean", x)

    def sum(self, x):
        return self.record("sum", x)

    def reshape(self, x, shape):
        return self.record("reshape", x, shape=tuple(shape))

    def transpose(self, x, axes):
        return self.record("transpose", x, axes=tuple(axes))

    def select(self, x, index):
        return self.record("select", x, index=index)

    def concat(self, xs, axis: int):
        return self.record("concat", *xs, axis=axis)

    # backward ---------------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every trainable leaf it depends on."""
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node.op == "param":
                grads[node.id] = g  # keep leaf grads; popped below
                continue
            if not node.inputs:
                continue
            _, bwd = PRIMITIVES[node.op]
            saved, payload = node.saved
            needs = tuple(n.requires_grad for n in node.inputs)
            in_grads = bwd(g, saved, tuple(n.value for n in node.inputs), payload, needs)
            for inp, gi in zip(node.inputs, in_grads):
                if not inp.requires_grad or gi is None:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        out = {}
        for name, nid in self.trainable.items():
            if nid in grads:
                g = grads[nid]
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient for {name}")
                out[name] = g
        return out


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    discrepancy: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.discrepancy.values())

    def __str__(self):
        lines = [f"{'PASS' if v <= self.tolerance else 'FAIL'} {k}: {v:.3e}" for k, v in self.discrepancy.items()]
        return "\n".join(lines)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def grad_check(
    build_loss: Callable[[Tape, Mapping[str, Node]], Node],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients with central differences for each named array.

    ``build_loss(tape, nodes)`` must build a scalar loss from the parameter
    nodes in ``nodes``.  The arrays in ``params`` are perturbed in place and
    restored.
    """

    def evaluate() -> tuple[Tape, Node]:
        tape = Tape()
        nodes = {name: tape.param(name, arr) for name, arr in params.items()}
        return tape, build_loss(tape, nodes)

    tape, loss = evaluate()
    if not np.isfinite(loss.value):
        raise NonFiniteError("loss is not finite at the check point")
    analytic = tape.backward(loss)
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in params.items():
        original = arr.copy()

        def f(flat, arr=arr):
            arr[...] = flat.reshape(arr.shape)
            return evaluate()[1].value

        try:
            numeric = finite_diff_grad(f, original.reshape(-1), h).reshape(arr.shape)
        except NonFiniteError as exc:
            raise NonFiniteError(f"parameter {name}: {exc}") from None
        finally:
            arr[...] = original
        got = analytic.get(name, np.zeros_like(arr))
        report.discrepancy[name] = relative_error(got, numeric)
    return report
