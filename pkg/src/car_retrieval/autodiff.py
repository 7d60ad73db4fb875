"""Dense float64 tensors with reverse-mode automatic differentiation.

Every trainable computation in the package goes through :class:`Tensor`.
Operations build a graph of closures; :meth:`Tensor.backward` walks it in
reverse topological order and accumulates gradients into leaves.

Broadcasting is deliberately narrow: elementwise ops accept either two
tensors of identical shape or a tensor and a scalar.  Anything else raises
:class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can take part in a differentiation graph."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = ""
        self._leaves_touched: Optional[list] = None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by python scalars")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    # -- differentiation ------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Raises if ``self`` is not a scalar, or if a previous backward from
        this tensor left gradients that were never zeroed.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise BackwardError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._leaves_touched is not None and any(
            leaf.grad is not None for leaf in self._leaves_touched
        ):
            raise BackwardError("backward called twice without zeroing gradients")
        if not self.requires_grad:
            self._leaves_touched = []
            return

        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        leaves = []
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=np.float64)
                else:
                    node.grad += g
                leaves.append(node)
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self._leaves_touched = leaves


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaves_touched = None
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._op = op
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    # scalar operand broadcast against a tensor: gradient sums back down
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def backward(g):
        return _unscalar(g, a), _unscalar(g, b)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        return _unscalar(g, a), _unscalar(-g, b)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def backward(g):
        ga = _unscalar(g * b.data, a) if a.requires_grad else None
        gb = _unscalar(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def elementwise(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by tag: add, sub, mul, relu, tanh, exp, log, scale."""
    table = {"add": add, "sub": sub, "mul": mul, "relu": relu, "tanh": tanh,
             "exp": exp, "log": log, "scale": scale}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reductions


def _norm_axis(t: Tensor, axis):
    if axis is None:
        if t.size == 0:
            raise DimensionError("reduction over an empty tensor")
        return None
    if not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")
    axis %= t.ndim
    if t.shape[axis] == 0:
        raise DimensionError(f"reduction over empty axis {axis} of shape {t.shape}")
    return axis


def _expand(g: np.ndarray, t: Tensor, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, t.shape)


def reduce_sum(t: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(t, axis)
    out = np.sum(t.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (t,), lambda g: (_expand(g, t, axis, keepdims),), "sum")


def reduce_mean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(t, axis)
    count = t.size if axis is None else t.shape[axis]
    out = np.mean(t.data, axis=axis, keepdims=keepdims)
    return _result(
        np.asarray(out), (t,), lambda g: (_expand(g, t, axis, keepdims) / count,), "mean"
    )


def reduce_max(t: Tensor, axis=None, keepdims=False) -> Tensor:
    axis = _norm_axis(t, axis)
    if axis is None:
        flat = int(np.argmax(t.data))
        out = np.asarray(t.data.flat[flat])

        def backward(g):
            grad = np.zeros_like(t.data)
            grad.flat[flat] = g
            return (grad,)

        return _result(out, (t,), backward, "max")

    idx = np.argmax(t.data, axis=axis)
    out = np.take_along_axis(t.data, np.expand_dims(idx, axis), axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def backward(g):
        grad = np.zeros_like(t.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(grad, np.expand_dims(idx, axis), gk, axis)
        return (grad,)

    return _result(out, (t,), backward, "max")


def reduce(op: str, t: Tensor, axis=None, keepdims=False) -> Tensor:
    table = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}
    if op not in table:
        raise ValueError(f"unknown reduction {op!r}")
    return table[op](t, axis, keepdims)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(t: Tensor, shape) -> Tensor:
    orig = t.shape
    return _result(t.data.reshape(shape), (t,), lambda g: (g.reshape(orig),), "reshape")


def transpose(t: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(t.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),), "transpose")


def take(t: Tensor, index) -> Tensor:
    """Basic (int/slice) indexing with a scatter backward."""
    out = t.data[index]

    def backward(g):
        grad = np.zeros_like(t.data)
        grad[index] = g
        return (grad,)

    return _result(np.array(out), (t,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    ref = tensors[0].shape
    ax = axis % len(ref) if ref else 0
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    extents = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, extents, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` [V x d] by integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"index out of range for table with {table.shape[0]} rows")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result(table.data[ids], (table,), backward, "embedding")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[m,k] @ [k,n]``, batched ``[...,m,k] @ [...,k,n]`` with equal
    leading extents, and ``[...,m,k] @ [k,n]`` with a shared right operand.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} and {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is [in x out]."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} does not match {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out.reshape(*lead, w.shape[1]), parents, backward, "linear")


def softmax(t: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``t``) marks the entries that take
    part; excluded entries get probability exactly 0.
    """
    x = t.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax: a row has every position masked")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (t,), backward, "softmax")


def softmax_rows(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {t.shape}")
    return softmax(t)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shape {gamma.shape} does not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` [N,T,d] over positions where ``mask`` [N,T] is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:2]:
        raise DimensionError(f"masked_mean: mask {mask.shape} does not match {x.shape}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DimensionError("masked_mean: a row has no unmasked positions")
    w = mask / counts[:, None]
    out = np.einsum("nt,ntd->nd", w, x.data)
    return _result(out, (x,), lambda g: (w[:, :, None] * g[:, None, :],), "masked_mean")


def l2_normalize(x: Tensor, tiny: float = 1e-12) -> Tensor:
    """Normalize rows to unit length; rows with norm below ``tiny`` become zero."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    ok = norms >= tiny
    safe = np.where(ok, norms, 1.0)
    y = np.where(ok, x.data / safe, 0.0)

    def backward(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        return (np.where(ok, (g - y * proj) / safe, 0.0),)

    return _result(y, (x,), backward, "l2_normalize")


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity [A x B]; zero-norm rows give similarity 0."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"cosine_matrix: incompatible shapes {a.shape} and {b.shape}")
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


# ---------------------------------------------------------------------------
# gradient checking


def _one_sided_disagree(fp: float, f0: float, fm: float, h: float) -> bool:
    dp = (fp - f0) / h
    dm = (f0 - fm) / h
    return abs(dp - dm) > 1e-2 * max(1.0, abs(dp), abs(dm))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               skip_kinks: bool = True) -> float:
    """Largest relative gap between the analytic and central-difference gradient.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``.  With
    ``skip_kinks`` a coordinate whose one-sided differences disagree sharply
    (a relu/hinge kink within ``h``) is left out.
    """
    prev = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        loss = f(x)
        loss.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
        x.grad = None
        flat = x.data.reshape(-1)
        worst = 0.0
        with no_grad():
            f0 = float(f(x).data)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(x).data)
                flat[i] = orig - h
                fm = float(f(x).data)
                flat[i] = orig
                if skip_kinks and _one_sided_disagree(fp, f0, fm, h):
                    continue
                numeric = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        x.requires_grad = prev
        x.grad = None


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
