"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation records its parents and a backward closure on the result.
Backward closures are written with Tensor operations, so running a backward
pass with ``create_graph=True`` records a differentiable graph of the
gradient itself. That is what the input-Jacobian penalty needs: its value is
a function of gradients and its own gradient flows back into the weights.
When no graph is requested, backward runs under :func:`no_grad` and the
closures reduce to plain numpy work.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "NonFiniteError",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "grad",
    "as_tensor",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or infinite values."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def _grad_mode(enabled: bool):
    previous = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = previous


def no_grad():
    """Context manager: operations inside are not recorded."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


#: Check every op result for NaN/Inf. One reduction per op.
CHECK_FINITE = True

Backward = Callable[["Tensor", tuple], Sequence["Tensor | None"]]


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    ``grad`` is a numpy array accumulated by :meth:`backward` on tensors that
    require gradients. Use :func:`grad` to obtain gradients as tensors
    (optionally differentiable) without touching ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None
        self._op = ""

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=8)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, index):
        return getitem(self, index)

    # ------------------------------------------------------- method wrappers
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return power(self, 0.5)

    def abs(self) -> Tensor:
        return tabs(self)

    def max(self, axis=None, keepdims: bool = False) -> Tensor:
        return tmax(self, axis, keepdims)

    def broadcast_to(self, shape) -> Tensor:
        return broadcast_to(self, tuple(shape))

    # --------------------------------------------------------------- backward
    def backward(self, gradient=None, create_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        ``self`` must be a scalar unless ``gradient`` is given. Gradients add up
        across repeated uses of a tensor and across calls.
        """
        if gradient is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            gradient = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        seed = as_tensor(gradient)
        _run_backward([self], [seed], None, create_graph)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


_VALUE_PRESERVING = frozenset(
    {"transpose", "reshape", "broadcast", "getitem", "scatter", "stack", "neg", "abs", "max", "relu", "gate"})


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
    # One summation in memory order; only a non-finite total needs the exact check.
    # Ops that merely move, mask or sign-flip finite inputs are skipped.
    if (CHECK_FINITE and op not in _VALUE_PRESERVING and data.size
            and not math.isfinite(float(np.sum(data.ravel("K"))))):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _topo_order(roots: Iterable[Tensor]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if id(root) in seen or not root.requires_grad:
            continue
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order  # parents precede children


def _run_backward(
    roots: Sequence[Tensor],
    seeds: Sequence[Tensor],
    inputs: Sequence[Tensor] | None,
    create_graph: bool,
) -> list[Tensor | None] | None:
    order = _topo_order(roots)
    if inputs is None:
        relevant = {id(n) for n in order}
    else:
        # Only propagate along paths that reach a requested input.
        targets = {id(t) for t in inputs}
        relevant = set()
        for node in order:
            if id(node) in targets or any(id(p) in relevant for p in node._parents):
                relevant.add(id(node))
    grads: dict[int, Tensor] = {}
    for root, seed in zip(roots, seeds):
        if seed.shape != root.shape:
            raise DimensionError(f"gradient shape {seed.shape} does not match output shape {root.shape}")
        if id(root) in grads:
            grads[id(root)] = grads[id(root)] + seed
        else:
            grads[id(root)] = seed
    wanted = {id(t) for t in inputs} if inputs is not None else set()
    captured: dict[int, Tensor] = {}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None or id(node) not in relevant:
                continue
            if id(node) in wanted:
                captured[id(node)] = g
            if node._backward is None:
                if inputs is None:
                    node.grad = g.data.copy() if node.grad is None else node.grad + g.data
                continue
            needs = tuple(p.requires_grad and id(p) in relevant for p in node._parents)
            if not any(needs):
                continue
            parent_grads = node._backward(g, needs)
            for parent, pg, need in zip(node._parents, parent_grads, needs):
                if pg is None or not need:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    if inputs is None:
        return None
    return [captured.get(id(t)) for t in inputs]


def grad(
    outputs: Tensor | Sequence[Tensor],
    inputs: Sequence[Tensor],
    grad_outputs=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``outputs`` with respect to ``inputs``, returned as tensors.

    Leaves' ``.grad`` is left untouched. With ``create_graph`` the returned
    tensors are themselves differentiable. Inputs not reachable from the
    outputs get a zero gradient.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    if grad_outputs is None:
        grad_outputs = [None] * len(outputs)
    elif isinstance(grad_outputs, (Tensor, np.ndarray)):
        grad_outputs = [grad_outputs]
    seeds = []
    for out, go in zip(outputs, grad_outputs):
        if go is None:
            if out.data.size != 1:
                raise ContractError(f"grad() needs grad_outputs for non-scalar output of shape {out.shape}")
            go = np.ones_like(out.data)
        seeds.append(as_tensor(go))
    live = [(o, s) for o, s in zip(outputs, seeds) if o.requires_grad]
    if not live:
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    found = _run_backward([o for o, _ in live], [s for _, s in live], list(inputs), create_graph)
    return [g if g is not None else Tensor(np.zeros_like(t.data)) for g, t in zip(found, inputs)]


# ============================================================================
# primitive operations
# ============================================================================


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    out = tsum(g, axes, keepdims=True) if axes else g
    if extra:
        out = reshape(out, shape)
    elif out.shape != shape:
        out = reshape(out, shape)
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g, needs):
        return (
            _unbroadcast(mul(g, b), a.shape) if needs[0] else None,
            _unbroadcast(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out_data = a.data / b.data

    def backward(g, needs):
        ga = _unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = None
        if needs[1]:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(out_data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)

    def backward(g, needs):
        if exponent == 1.0:
            return (g,)
        return (mul(g, mul(power(a, exponent - 1.0), exponent)),)

    return _make(np.power(a.data, exponent), (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), lambda g, needs: (mul(g, out),), "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, needs: (div(g, a),), "log")


def tabs(a) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = as_tensor(a)
    sign = Tensor(np.sign(a.data))
    return _make(np.abs(a.data), (a,), lambda g, needs: (mul(g, sign),), "abs")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def backward(g, needs):
        ga = _unbroadcast(matmul(g, swapaxes(b)), a.shape) if needs[0] else None
        gb = _unbroadcast(matmul(swapaxes(a), g), b.shape) if needs[1] else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def swapaxes(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def backward(g, needs):
        if not keepdims:
            g = reshape(g, kept_shape)
        return (broadcast_to(g, a.shape),)

    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    return _make(np.asarray(data), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = reshape(a, (a.size,))
        return tmax(flat, 0, keepdims=False) if not keepdims else reshape(
            tmax(flat, 0), (1,) * a.ndim
        )
    if not isinstance(axis, int):
        raise ContractError("max() reduces over a single axis")
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    mask_t = Tensor(mask)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)
    kept_shape = tuple(1 if i == axis else n for i, n in enumerate(a.shape))

    def backward(g, needs):
        if not keepdims:
            g = reshape(g, kept_shape)
        return (mul(broadcast_to(g, a.shape), mask_t),)

    return _make(np.asarray(data), (a,), backward, "max")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(data, (a,), lambda g, needs: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g, needs: (transpose(g, inverse),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(data, (a,), lambda g, needs: (_unbroadcast(g, a.shape),), "broadcast")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    data = a.data[index]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    return _make(data, (a,), lambda g, needs: (scatter(g, index, a.shape),), "getitem")


def scatter(g, index, shape) -> Tensor:
    """Place ``g`` at ``index`` of a zero array of ``shape`` (adjoint of indexing)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, index, g.data)
    return _make(out, (g,), lambda gg, needs: (getitem(gg, index),), "scatter")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % data.ndim

    def backward(g, needs):
        return tuple(
            getitem(g, (slice(None),) * axis + (i,)) if need else None
            for i, need in enumerate(needs)
        )

    return _make(data, tuple(tensors), backward, "stack")
