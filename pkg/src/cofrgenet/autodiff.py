"""A small reverse-mode differentiation engine over numpy arrays.

Operations are recorded on the innermost active :class:`Tape` when at least one
input requires a gradient. ``Tape.backward`` walks the recorded nodes in strict
reverse order. New operations subclass :class:`Function` and supply ``forward``
and ``backward`` over raw arrays; :class:`CFLayer` is one such function.
"""

from __future__ import annotations

import threading
from typing import Sequence

import numpy as np

from . import cfcore
from .cfcore import DivisionCounter, PoleGuard

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "iub" and dtype is None:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


class Node:
    __slots__ = ("fn", "inputs", "output")

    def __init__(self, fn, inputs, output):
        self.fn = fn
        self.inputs = inputs
        self.output = output


class Tape:
    """Append-only record of operations; append order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._thread = threading.get_ident()

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self, "tapes must be exited in LIFO order"
        stack.pop()

    def record(self, node: Node) -> None:
        if threading.get_ident() != self._thread:
            raise RuntimeError("a tape is confined to the thread that created it")
        self.nodes.append(node)

    def backward(self, loss: Tensor, grad=None) -> dict:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

        Returns a mapping from leaf tensor to its gradient array.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward needs a scalar loss or an explicit upstream gradient")
            grad = np.ones_like(loss.data)
        grads = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        produced = set()
        for node in self.nodes:
            produced.add(id(node.output))
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.fn.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        out = {}
        for key, t in leaves.items():
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g
            out[t] = g
        return out


def backward(loss: Tensor, tape: Tape) -> dict:
    return tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations.

    Subclasses implement ``forward(*arrays, **kwargs) -> array`` and
    ``backward(grad) -> tuple`` with one entry (or ``None``) per input.
    """

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        tensors = [as_tensor(x) for x in inputs]
        fn = cls()
        out = Tensor(fn.forward(*[t.data for t in tensors], **kwargs))
        tape = active_tape()
        if tape is not None and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            tape.record(Node(fn, tensors, out))
        return out

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


# --- elementwise arithmetic ----------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return _unbroadcast(g * self.b, self.a.shape), _unbroadcast(g * self.a, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Reciprocal(Function):
    """``1/x``; the backward rule reuses the output and does not divide."""

    def forward(self, a, counter: DivisionCounter | None = None):
        self.out = cfcore._divide(1.0, a, counter)
        return self.out

    def backward(self, g):
        return (-g * self.out * self.out,)


def _binary(cls, a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    return cls.apply(a, b)


def add(a, b) -> Tensor: return _binary(Add, a, b)
def sub(a, b) -> Tensor: return _binary(Sub, a, b)
def mul(a, b) -> Tensor: return _binary(Mul, a, b)
def neg(a) -> Tensor: return Neg.apply(a)
def reciprocal(a, counter: DivisionCounter | None = None) -> Tensor: return Reciprocal.apply(a, counter=counter)


# --- shape ----------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ g
        return _unbroadcast(ga, self.a.shape), _unbroadcast(gb, self.b.shape)


class TriuMatMul(Function):
    """``x @ triu(U)``: only the upper triangle of ``U`` is read or updated."""

    def forward(self, x, u):
        n = u.shape[-1]
        self.mask = np.triu(np.ones((n, n), dtype=bool))
        self.x, self.u = x, np.where(self.mask, u, 0.0).astype(u.dtype)
        return x @ self.u

    def backward(self, g):
        gx = g @ np.swapaxes(self.u, -1, -2)
        gu = _unbroadcast(np.swapaxes(self.x, -1, -2) @ g, self.u.shape)
        return _unbroadcast(gx, self.x.shape), np.where(self.mask, gu, 0.0).astype(gu.dtype)


class Transpose(Function):
    def forward(self, a):
        return np.swapaxes(a, -1, -2)

    def backward(self, g):
        return (np.swapaxes(g, -1, -2),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class GetItem(Function):
    def forward(self, a, idx):
        self.shape, self.dtype, self.idx = a.shape, a.dtype, idx
        return a[idx]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.idx, g)
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        self.axis = axis
        self.sizes = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.sizes, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.moveaxis(g, self.axis, 0))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


def matmul(a, b) -> Tensor: return MatMul.apply(a, b)
def triu_matmul(x, u) -> Tensor: return TriuMatMul.apply(x, u)
def transpose(a) -> Tensor: return Transpose.apply(a)
def reshape(a, shape) -> Tensor: return Reshape.apply(a, shape=tuple(shape))
def getitem(a, idx) -> Tensor: return GetItem.apply(a, idx=idx)
def concat(tensors: Sequence, axis: int = -1) -> Tensor: return Concat.apply(*tensors, axis=axis)
def stack(tensors: Sequence, axis: int = 0) -> Tensor: return Stack.apply(*tensors, axis=axis)
def sum(a, axis=None, keepdims=False) -> Tensor: return Sum.apply(a, axis=axis, keepdims=keepdims)  # noqa: A001


def mean(a, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


# --- nonlinearities ---------------------------------------------------------------

class Sigmoid(Function):
    def forward(self, a):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * a))
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class SiLU(Function):
    def forward(self, a):
        self.a = a
        self.s = 0.5 * (1.0 + np.tanh(0.5 * a))
        return a * self.s

    def backward(self, g):
        s = self.s
        return (g * (s + self.a * s * (1.0 - s)),)


_GELU_C = np.sqrt(2.0 / np.pi)


class GELU(Function):
    """Tanh approximation."""

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a**3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, g):
        a, t = self.a, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)


class Clamp(Function):
    """Clip into ``[lo, hi]`` (broadcast along trailing axes); gradient passes inside."""

    def forward(self, a, lo, hi):
        out = np.minimum(np.maximum(a, lo), hi).astype(a.dtype)
        self.inside = (a >= lo) & (a <= hi)
        return out

    def backward(self, g):
        return (g * self.inside,)


def sigmoid(a) -> Tensor: return Sigmoid.apply(a)
def silu(a) -> Tensor: return SiLU.apply(a)
def gelu(a) -> Tensor: return GELU.apply(a)
def clamp(a, lo, hi) -> Tensor: return Clamp.apply(a, lo=lo, hi=hi)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.rstd
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * self.xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * self.gain
        n = gx_hat.shape[-1]
        gx = self.rstd * (gx_hat - gx_hat.mean(-1, keepdims=True)
                          - self.xhat * (gx_hat * self.xhat).sum(-1, keepdims=True) / n)
        return gx, ggain, gbias


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(x, gain, bias, eps=eps)


class Embedding(Function):
    def forward(self, weight, ids):
        self.shape, self.dtype = weight.shape, weight.dtype
        self.ids = ids.astype(np.int64)
        return weight[self.ids]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.ids, g)
        return out, None


def embedding(weight, ids) -> Tensor:
    return Embedding.apply(weight, Tensor(np.asarray(ids)))


class CausalSoftmax(Function):
    """Row-wise softmax over the last axis with column ``j > i`` masked out."""

    def forward(self, s):
        n, m = s.shape[-2:]
        if n != m:
            raise ValueError(f"causal softmax needs square scores, got {s.shape}")
        mask = np.triu(np.ones((n, n), dtype=bool), 1)
        z = np.where(mask, -np.inf, s)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def causal_softmax(scores) -> Tensor:
    return CausalSoftmax.apply(scores)


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer targets under ``softmax(logits)``."""

    def forward(self, logits, targets):
        self.targets = targets.astype(np.int64).reshape(-1)
        flat = logits.reshape(-1, logits.shape[-1])
        z = flat - flat.max(axis=-1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        logp = z - logsum
        self.shape = logits.shape
        self.probs = np.exp(logp)
        n = flat.shape[0]
        return np.asarray(-logp[np.arange(n), self.targets].mean(), dtype=logits.dtype)

    def backward(self, g):
        n = self.probs.shape[0]
        grad = self.probs.copy()
        grad[np.arange(n), self.targets] -= 1.0
        grad *= g / n
        return grad.reshape(self.shape), None


def cross_entropy(logits, targets) -> Tensor:
    return CrossEntropy.apply(logits, Tensor(np.asarray(targets)))


# --- continued-fraction layer -------------------------------------------------------

class CFLayer(Function):
    """Fractional part of a continued fraction over the last axis.

    Forward runs the continuant recursion and forms one guarded reciprocal per
    fraction; the table is kept for backward, which only multiplies.
    """

    def forward(self, a, guard: PoleGuard = PoleGuard(), counter: DivisionCounter | None = None):
        self.table = cfcore.continuants_forward(a, guard)
        if counter is not None:
            counter.charge(self.table.divisions_used)
        return np.asarray(cfcore.cf_eval(self.table))

    def backward(self, g):
        return (cfcore.cf_grad(self.table, g),)


class LiteralCFLayer(Function):
    """Same function evaluated layer by layer, guarding every denominator."""

    def forward(self, a, guard: PoleGuard = PoleGuard(), counter: DivisionCounter | None = None):
        self.guard, self.counter = guard, counter
        f, self.tails = cfcore.literal_forward(a, guard, counter)
        return np.asarray(f)

    def backward(self, g):
        return (cfcore.literal_backward(self.tails, g, self.guard, self.counter),)


def cf_layer(a, guard: PoleGuard = PoleGuard(), counter: DivisionCounter | None = None,
             impl: str = "continuant") -> Tensor:
    """Apply the continued-fraction layer to ``a`` of shape ``[..., d]``."""
    if impl == "continuant":
        return CFLayer.apply(a, guard=guard, counter=counter)
    if impl == "literal":
        return LiteralCFLayer.apply(a, guard=guard, counter=counter)
    raise ValueError(f"unknown cf implementation {impl!r}")
