"""Dense tensors with reverse-mode automatic differentiation.

The op set is the minimum needed to backpropagate a block reconstruction
loss through a small transformer block and a quantize-dequantize path:
matmul, broadcasting elementwise arithmetic, softmax, layer norm, GELU,
straight-through round/clip, MSE, plus shape plumbing (permute, reshape,
pad/crop along the last axis).

Gradients are recorded on an implicit tape: the first differentiable op
after a backward pass starts a fresh tape, and ``backward`` replays the
tape's records exactly once in reverse execution order, accumulating
gradients into leaf tensors. A tape dies after one backward pass.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, TapeError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_GELU_K0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_K1 = 0.044715


class Tape:
    """Execution-ordered record of differentiable ops.

    Records are appended in execution order, so the list is already a
    topological order of the graph. ``backward`` walks it once, in
    reverse, then marks the tape dead.
    """

    def __init__(self):
        self.records = []  # (out, inputs, backward_fn), execution order
        self.live = True

    def append(self, out, inputs, backward_fn):
        self.records.append((out, inputs, backward_fn))


_CURRENT_TAPE: Tape | None = None


def _active_tape() -> Tape:
    global _CURRENT_TAPE
    if _CURRENT_TAPE is None or not _CURRENT_TAPE.live:
        _CURRENT_TAPE = Tape()
    return _CURRENT_TAPE


class Tensor:
    """Immutable dense row-major array, optionally tracked for gradients.

    The buffer is frozen at construction; ops always allocate fresh
    outputs. ``grad`` is a plain numpy array, populated on leaves by
    ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_recorded")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._recorded = False  # True once produced by a recorded op

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.requires_grad and not self._recorded

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(other, self, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(other, self, "sub")

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(other, self, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtypes(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"mixed dtypes in one graph are forbidden: {sorted(map(str, dtypes))}")


def _make_out(data: np.ndarray, inputs, backward_fn) -> Tensor:
    """Wrap an op result; record it on the active tape if grads flow."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._recorded = True
        tape = _active_tape()
        out._tape = tape
        tape.append(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- core ops -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked (batched) operands follow numpy semantics."""
    if not isinstance(a, Tensor) or not isinstance(b, Tensor):
        raise TypeError("matmul expects Tensor operands")
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from exc

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make_out(data, (a, b), backward_fn)


def elementwise(a, b, kind: str) -> Tensor:
    """Broadcasting elementwise arithmetic: add | sub | mul | div."""
    if isinstance(a, Tensor):
        b = _as_tensor(b, a)
    elif isinstance(b, Tensor):
        a = _as_tensor(a, b)
    else:
        raise TypeError("elementwise expects at least one Tensor operand")
    _check_dtypes(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"non-broadcastable shapes: {a.shape} {kind} {b.shape}") from exc

    if kind == "add":
        data = a.data + b.data
    elif kind == "sub":
        data = a.data - b.data
    elif kind == "mul":
        data = a.data * b.data
    elif kind == "div":
        data = a.data / b.data
    else:
        raise ValueError(f"unknown elementwise kind: {kind!r}")

    def backward_fn(g):
        ga = gb = None
        if kind == "add":
            if a.requires_grad:
                ga = g
            if b.requires_grad:
                gb = g
        elif kind == "sub":
            if a.requires_grad:
                ga = g
            if b.requires_grad:
                gb = -g
        elif kind == "mul":
            if a.requires_grad:
                ga = g * b.data
            if b.requires_grad:
                gb = g * a.data
        else:  # div
            if a.requires_grad:
                ga = g / b.data
            if b.requires_grad:
                gb = -g * a.data / (b.data * b.data)
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make_out(data, (a, b), backward_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stable softmax over the last axis (max-subtraction)."""
    if x.shape[-1] < 1:
        raise ShapeError(f"softmax needs last dim >= 1, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _make_out(y, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    _check_dtypes(x, gamma, beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} must be ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gamma.data + beta.data

    def backward_fn(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return _make_out(y, (x, gamma, beta), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    u = _GELU_K0 * (xd + _GELU_K1 * xd**3)
    t = np.tanh(u)
    y = 0.5 * xd * (1.0 + t)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        du = _GELU_K0 * (1.0 + 3.0 * _GELU_K1 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make_out(y, (x,), backward_fn)


def round_ste(x: Tensor) -> Tensor:
    """Round half to even; backward is the identity (straight-through)."""
    data = np.rint(x.data)

    def backward_fn(g):
        return (g if x.requires_grad else None,)

    return _make_out(data, (x,), backward_fn)


def clip_ste(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; backward passes gradient on lo <= x <= hi inclusive."""
    if lo > hi:
        raise ValueError(f"clip_ste bounds inverted: lo={lo} > hi={hi}")
    data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g):
        return (g * mask if x.requires_grad else None,)

    return _make_out(data, (x,), backward_fn)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements (scalar output)."""
    _check_dtypes(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss shapes differ: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = np.asarray((diff * diff).mean(), dtype=a.dtype)
    scale = 2.0 / diff.size

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = g * scale * diff
        if b.requires_grad:
            gb = -g * scale * diff
        return ga, gb

    return _make_out(data, (a, b), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements (scalar output)."""
    data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=False),)

    return _make_out(data, (x,), backward_fn)


# -- shape plumbing ---------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(x.shape) if x.requires_grad else None,)

    return _make_out(data, (x,), backward_fn)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.transpose(x.data, axes)
    inverse = np.argsort(axes)

    def backward_fn(g):
        return (np.transpose(g, inverse) if x.requires_grad else None,)

    return _make_out(data, (x,), backward_fn)


def transpose_last2(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def pad_lastdim(x: Tensor, width: int) -> Tensor:
    """Zero-pad the last axis up to ``width``."""
    cur = x.shape[-1]
    if width < cur:
        raise ShapeError(f"pad_lastdim: target {width} < current {cur}")
    pad = [(0, 0)] * (x.ndim - 1) + [(0, width - cur)]
    data = np.pad(x.data, pad)

    def backward_fn(g):
        return (g[..., :cur] if x.requires_grad else None,)

    return _make_out(data, (x,), backward_fn)


def crop_lastdim(x: Tensor, width: int) -> Tensor:
    """Keep the first ``width`` entries of the last axis."""
    cur = x.shape[-1]
    if width > cur:
        raise ShapeError(f"crop_lastdim: target {width} > current {cur}")
    data = x.data[..., :width]

    def backward_fn(g):
        if not x.requires_grad:
            return (None,)
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., :width] = g
        return (full,)

    return _make_out(data, (x,), backward_fn)


# -- backward ---------------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate gradients of ``loss`` into every leaf that fed it.

    The loss must be a scalar produced on a live tape. Each record is
    visited exactly once, in reverse execution order; intermediate
    gradients are discarded after use, and the tape is dead afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced on a tape (no grad-requiring inputs)")
    if not tape.live:
        raise TapeError("tape is dead: backward already ran; re-run the forward pass")
    tape.live = False

    pending = {id(loss): np.ones_like(loss.data)}
    for out, inputs, backward_fn in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        grads = backward_fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            if inp.is_leaf:
                inp.grad = gi if inp.grad is None else inp.grad + gi
            else:
                prev = pending.get(id(inp))
                pending[id(inp)] = gi if prev is None else prev + gi
