"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything runs in double precision. A ``Tape`` records operations in
creation order (define-by-run), so the node list is already topologically
sorted and ``backward`` walks it exactly once in reverse. Broadcasting is
restricted to scalar-with-tensor; anything richer raises, which removes a
whole class of silent shape bugs.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

# When True, every op output is checked for NaN/Inf and raises on failure.
DEBUG_CHECK_FINITE = False

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A numpy array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        if DEBUG_CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in tensor")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalars (python numbers) are the only non-Tensor
    # operands accepted; see module docstring.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager; ops executed inside record themselves when
    their output requires a gradient. Tapes are single-use: build a fresh
    one per training step.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        if not self._nodes:
            raise ValueError("backward on an empty tape")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._nodes):
            gout = out.grad
            if gout is None:
                continue
            grads = backward_fn(gout)
            adopted: set[int] = set()
            for inp, g in zip(inputs, grads):
                if g is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if g.shape != inp.data.shape:
                    raise ValueError(
                        f"backward produced grad of shape {g.shape} for input "
                        f"of shape {inp.data.shape}"
                    )
                if inp.grad is None:
                    # Adopt freshly allocated grads; copy anything that may
                    # alias gout, a view, or an already-adopted buffer.
                    if g is gout or g.base is not None or id(g) in adopted:
                        inp.grad = g.copy()
                    else:
                        inp.grad = g
                    adopted.add(id(inp.grad))
                else:
                    inp.grad += g


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def make_op(data: np.ndarray, inputs: Sequence, backward_fn: Callable) -> Tensor:
    """Create a recorded op output. Extension hook for custom primitives.

    ``backward_fn(gout)`` must return one gradient array (or None) per
    entry of ``inputs``, aligned positionally.
    """
    requires = any(isinstance(i, Tensor) and i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape._nodes.append((out, tuple(inputs), backward_fn))
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar_operand(x) -> bool:
    if isinstance(x, (int, float)):
        return True
    if isinstance(x, Tensor):
        return x.data.size == 1
    return False


def _operand_data(x):
    return x.data if isinstance(x, Tensor) else np.float64(x)


def _check_binary_shapes(a, b) -> None:
    """Equal shapes, or one side a scalar; everything else is rejected."""
    if _is_scalar_operand(a) or _is_scalar_operand(b):
        return
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise ValueError("operands must be Tensors or python scalars")
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"shape mismatch: {a.data.shape} vs {b.data.shape} "
            "(only scalar broadcasting is supported)"
        )


def _reduce_to(g: np.ndarray, operand) -> Optional[np.ndarray]:
    """Collapse a full-shape gradient onto a scalar operand if needed."""
    if not isinstance(operand, Tensor):
        return None
    if operand.data.shape == g.shape:
        return g
    return np.sum(g).reshape(operand.data.shape)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    _check_binary_shapes(a, b)
    data = _operand_data(a) + _operand_data(b)
    return make_op(data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    _check_binary_shapes(a, b)
    data = _operand_data(a) - _operand_data(b)
    return make_op(data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    _check_binary_shapes(a, b)
    da, db = _operand_data(a), _operand_data(b)
    return make_op(da * db, (a, b),
                   lambda g: (_reduce_to(g * db, a), _reduce_to(g * da, b)))


def div(a, b) -> Tensor:
    _check_binary_shapes(a, b)
    da, db = _operand_data(a), _operand_data(b)
    data = da / db
    return make_op(data, (a, b),
                   lambda g: (_reduce_to(g / db, a),
                              _reduce_to(-g * da / (db * db), b)))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return make_op(data, (a,), lambda g: (g * data,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return make_op(data, (a,), lambda g: (g * (0.5 / data),))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0
    return make_op(data, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign for numerical stability.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return make_op(data, (a,), lambda g: (g * data * (1.0 - data),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return make_op(data, (a,), lambda g: (g * sig,))


def abs_(a: Tensor) -> Tensor:
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),))


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        data = np.sum(a.data).reshape(())
        return make_op(data, (a,),
                       lambda g: (np.broadcast_to(g, a.data.shape).copy(),))
    data = np.sum(a.data, axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return make_op(data, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.array(np.mean(a.data))
    return make_op(data, (a,),
                   lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product covering matrix-matrix, matrix-vector, vector-matrix."""
    da, db = a.data, b.data
    if da.ndim == 0 or db.ndim == 0 or da.ndim > 2 or db.ndim > 2:
        raise ValueError("matmul supports 1-D and 2-D operands only")
    data = da @ db

    def backward(g):
        if da.ndim == 2 and db.ndim == 2:
            return (g @ db.T, da.T @ g)
        if da.ndim == 2 and db.ndim == 1:
            return (np.outer(g, db), da.T @ g)
        if da.ndim == 1 and db.ndim == 2:
            return (g @ db.T, np.outer(da, g))
        # vector . vector -> scalar
        return (g * db, g * da)

    return make_op(data, (a, b), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return make_op(data, tuple(parts), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(np.reshape(a.data, shape), (a,),
                   lambda g: (np.reshape(g, a.data.shape),))


def take_column(a: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor as a 1-D tensor."""
    if a.data.ndim != 2:
        raise ValueError("take_column requires a 2-D tensor")
    data = a.data[:, j].copy()

    def backward(g):
        gi = np.zeros_like(a.data)
        gi[:, j] = g
        return (gi,)

    return make_op(data, (a,), backward)


def take_columns(a: Tensor, cols) -> Tensor:
    """Select columns of a 2-D tensor, keeping them differentiable."""
    if a.data.ndim != 2:
        raise ValueError("take_columns requires a 2-D tensor")
    cols = tuple(cols)
    data = a.data[:, cols].copy()

    def backward(g):
        gi = np.zeros_like(a.data)
        for k, j in enumerate(cols):
            gi[:, j] += g[:, k]
        return (gi,)

    return make_op(data, (a,), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias add: x [N, H] + b [H]. The one sanctioned non-scalar
    broadcast, kept explicit as its own op."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ValueError("add_bias expects x [N, H] and b [H]")
    return make_op(x.data + b.data[None, :], (x, b),
                   lambda g: (g, np.sum(g, axis=0)))


def affine(x: Tensor, w: Tensor, b: Tensor, activation: Optional[str] = None) -> Tensor:
    """Fused activation(x @ w + b) for MLP layers; one temporary instead of
    three. activation is None, "relu", or "sigmoid"."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError("affine expects x [N, I], w [I, O], b [O]")
    if x.data.shape[1] != w.data.shape[0] or w.data.shape[1] != b.data.shape[0]:
        raise ValueError("affine operand shapes are inconsistent")
    h = x.data @ w.data
    h += b.data

    if activation is None:
        def backward(g):
            return (g @ w.data.T, x.data.T @ g, np.sum(g, axis=0))
    elif activation == "relu":
        np.maximum(h, 0.0, out=h)
        mask = h > 0.0

        def backward(g):
            gh = g * mask
            return (gh @ w.data.T, x.data.T @ gh, np.sum(gh, axis=0))
    elif activation == "sigmoid":
        with np.errstate(over="ignore"):  # exp overflow saturates to 0 cleanly
            np.negative(h, out=h)
            np.exp(h, out=h)
            h += 1.0
            np.reciprocal(h, out=h)
        out_ref = h

        def backward(g):
            gh = g * (out_ref * (1.0 - out_ref))
            return (gh @ w.data.T, x.data.T @ gh, np.sum(gh, axis=0))
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return make_op(h, (x, w, b), backward)


def axis_diff(a: Tensor, axis: int) -> Tensor:
    """Adjacent differences along one axis (length shrinks by one)."""
    if a.data.shape[axis] < 2:
        raise ValueError("axis_diff needs at least two entries along the axis")
    data = np.diff(a.data, axis=axis)

    def backward(g):
        gi = np.zeros_like(a.data)
        sl_hi = [slice(None)] * a.data.ndim
        sl_lo = [slice(None)] * a.data.ndim
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        gi[tuple(sl_hi)] += g
        gi[tuple(sl_lo)] -= g
        return (gi,)

    return make_op(data, (a,), backward)


def exclusive_cumsum(a: Tensor, axis: int) -> Tensor:
    """Cumulative sum excluding the current element (zero-leading).

    Built by shifting, not by subtracting the element back out, so the
    output is exactly independent of the final entry along the axis.
    """
    data = np.zeros_like(a.data)
    src = [slice(None)] * a.data.ndim
    dst = [slice(None)] * a.data.ndim
    src[axis] = slice(None, -1)
    dst[axis] = slice(1, None)
    np.cumsum(a.data[tuple(src)], axis=axis, out=data[tuple(dst)])

    def backward(g):
        # grad_j = sum_{k > j} g_k; the last slot along the axis gets zero
        out = np.zeros_like(g)
        tail = np.cumsum(np.flip(g[tuple(dst)], axis=axis), axis=axis)
        out[tuple(src)] = np.flip(tail, axis=axis)
        return (out,)

    return make_op(data, (a,), backward)


def clip_min(a: Tensor, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a >= floor."""
    data = np.maximum(a.data, floor)
    mask = a.data >= floor
    return make_op(data, (a,), lambda g: (g * mask,))


def scale_grad(a: Tensor, scale: np.ndarray) -> Tensor:
    """Identity forward; backward multiplies the gradient elementwise."""
    s = np.asarray(scale, dtype=np.float64)
    if s.shape != a.data.shape:
        raise ValueError("scale_grad factor must match the tensor shape")
    return make_op(a.data, (a,), lambda g: (g * s,))


def detach(a: Tensor) -> Tensor:
    """Stop-gradient: identical values, contributes zero gradient."""
    return Tensor(a.data, requires_grad=False)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor,
                            h: float = 1e-5, delta: float = 1e-12) -> float:
    """Compare analytic gradients of f against central differences.

    f must be a deterministic scalar-valued function of x. Returns the max
    over coordinates of |analytic - central| / (|analytic| + |central| + delta).
    Resets and overwrites ``x.grad``.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x.zero_grad()
    was_rg = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            out = f(x)
            tape.backward(out)
        analytic = np.zeros(x.data.shape) if x.grad is None else x.grad.copy()
    finally:
        x.requires_grad = was_rg

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        f_hi = float(f(x).data.reshape(()))
        flat[i] = keep - h
        f_lo = float(f(x).data.reshape(()))
        flat[i] = keep
        numeric[i] = (f_hi - f_lo) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)

    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + delta)
    return float(np.max(err)) if err.size else 0.0
