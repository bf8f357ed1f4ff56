"""Dense float64 tensors with a reverse-mode autodiff tape.

The tape is built to be differentiated *through*: every op's vector-Jacobian
product is itself expressed with tape ops, so calling ``backward`` with
``create_graph=True`` records the gradient computation and a later backward
can differentiate it. That is what lets a matching loss reach back through a
chain of unrolled ``traced_sgd_step`` parameter updates into the synthetic
data that produced the inner gradients.

Conventions:
  * every Tensor holds a float64 ndarray; any op producing NaN/Inf raises
    NumericalError immediately,
  * non-Tensor operands (ndarrays, floats) are constants: no gradient is
    computed for them,
  * no implicit broadcasting between operands; ``broadcast_to``/``sum_to``
    are the explicit escape hatches,
  * a Tensor created while a tape is active belongs to that tape; leaves
    (``leaf``) belong to no tape and may be used anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalError, ShapeError, TapeError

Array = np.ndarray


# ---------------------------------------------------------------------------
# tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list[Optional["Tape"]] = []


def _active() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of operations; topological by construction."""

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


class _NoRecord:
    """Temporarily suspend recording (used by non-create_graph backward).

    Per-op finite checks are suspended too: the sweep's arithmetic cannot be
    replayed anyway, and ``backward`` verifies the returned gradients
    instead.
    """

    def __enter__(self) -> None:
        global _CHECK_DEPTH
        _TAPE_STACK.append(None)
        _CHECK_DEPTH += 1

    def __exit__(self, *exc) -> None:
        global _CHECK_DEPTH
        _TAPE_STACK.pop()
        _CHECK_DEPTH -= 1


_CHECK_DEPTH = 0


class Node:
    __slots__ = ("op", "out", "inputs", "vjp", "index", "tape")

    def __init__(self, op, out, inputs, vjp, index, tape):
        self.op = op
        self.out = out
        self.inputs = inputs  # positional; non-Tensor entries are constants
        self.vjp = vjp  # Callable[[Tensor], tuple[Optional[Tensor], ...]]
        self.index = index
        self.tape = tape


class Tensor:
    """Immutable-by-convention float64 array, optionally tied to a tape node."""

    __slots__ = ("data", "node", "tape", "first_use")

    def __init__(self, data: Array, node: Optional[Node] = None, tape: Optional[Tape] = None):
        self.data = data
        self.node = node
        self.tape = tape
        # (tape, node index) of the first consumer; bounds backward's scan
        self.first_use: Optional[tuple["Tape", int]] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, taped={self.node is not None})"


def leaf(values) -> Tensor:
    """A differentiable leaf; belongs to no tape, usable on any."""
    data = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite values in leaf tensor")
    return Tensor(data)


def _as_array(x) -> Array:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _make(op: str, data: Array, inputs: tuple, vjp, check: bool = True) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    # data.sum() is a fast one-pass screen: any NaN/Inf makes it non-finite.
    # A finite-but-overflowing sum falls through to the exact check.
    if (
        check
        and _CHECK_DEPTH == 0
        and not np.isfinite(float(data.sum()))
        and not np.all(np.isfinite(data))
    ):
        raise NumericalError(f"non-finite output of op '{op}'")
    tape = _active()
    if tape is None or not any(isinstance(x, Tensor) for x in inputs):
        return Tensor(data)
    index = len(tape.nodes)
    for x in inputs:
        if isinstance(x, Tensor):
            if x.tape is not None and x.tape is not tape:
                raise TapeError(f"op '{op}': input tensor belongs to a different tape")
            if x.first_use is None or x.first_use[0] is not tape:
                x.first_use = (tape, index)
    out = Tensor(data, tape=tape)
    node = Node(op, out, inputs, vjp, index, tape)
    out.node = node
    tape.nodes.append(node)
    return out


def backward(loss: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Untouched wrt tensors get zero gradients. With ``create_graph`` the
    gradient computation is recorded on the active tape so it can itself be
    differentiated.
    """
    if loss.data.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    if loss.node is None:
        # constant loss: every wrt gradient is zero (or one for loss itself)
        return [
            leaf(np.ones_like(w.data)) if w is loss else leaf(np.zeros_like(w.data))
            for w in wrt
        ]
    tape = loss.node.tape
    for w in wrt:
        if w.node is not None and w.node.tape is not tape:
            raise TapeError("wrt tensor is not on the loss tape")

    wrt_ids = {id(w) for w in wrt}
    pos = loss.node.index

    # Forward reachability from wrt bounds the work: nothing recorded before
    # a wrt tensor's first appearance can depend on it, so the scan (and the
    # reverse sweep) cover only the tape segment that matters. This keeps a
    # chain of per-step inner backwards linear in total unroll length.
    start = pos + 1
    for w in wrt:
        if w.node is not None:
            lo = w.node.index
        elif w.first_use is not None and w.first_use[0] is tape:
            lo = w.first_use[1]
        else:
            lo = pos + 1  # never used on this tape: zero gradient
        start = min(start, lo)
    nodes = tape.nodes[start : pos + 1]

    reach: set[int] = set(wrt_ids)
    for node in nodes:
        for x in node.inputs:
            if isinstance(x, Tensor) and id(x) in reach:
                reach.add(id(node.out))
                break
    if id(loss) not in reach:
        return [leaf(np.ones_like(w.data)) if w is loss else leaf(np.zeros_like(w.data)) for w in wrt]

    grads: dict[int, Tensor] = {id(loss): leaf(np.ones_like(loss.data))}
    results: dict[int, Tensor] = {}
    guard = _NoRecord() if not create_graph else _null_ctx()
    with guard:
        for node in reversed(nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wrt_ids:
                results[id(node.out)] = g
            in_grads = node.vjp(g)
            for x, gx in zip(node.inputs, in_grads):
                if gx is None or not isinstance(x, Tensor):
                    continue
                if id(x) not in reach:
                    continue
                prev = grads.get(id(x))
                grads[id(x)] = gx if prev is None else add(prev, gx)
    out: list[Tensor] = []
    for w in wrt:
        g = results.get(id(w)) or grads.get(id(w))
        if g is None:
            g = leaf(np.ones_like(w.data)) if w is loss else leaf(np.zeros_like(w.data))
        elif not create_graph and not np.all(np.isfinite(g.data)):
            raise NumericalError("non-finite gradient in backward")
        out.append(g)
    return out


class _null_ctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _same_shape(op: str, a, b) -> None:
    sa, sb = _as_array(a).shape, _as_array(b).shape
    if sa != sb:
        raise ShapeError(f"{op}: shape mismatch {sa} vs {sb}")


def add(a, b) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", _as_array(a) + _as_array(b), (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", _as_array(a) - _as_array(b), (a, b), lambda g: (g, neg(g)))


def neg(a) -> Tensor:
    return _make("neg", -_as_array(a), (a,), lambda g: (neg(g),), check=False)


def mul(a, b) -> Tensor:
    """Elementwise product; operands must share a shape exactly."""
    _same_shape("mul", a, b)

    def vjp(g):
        ga = mul(g, b) if isinstance(a, Tensor) else None
        gb = mul(g, a) if isinstance(b, Tensor) else None
        return (ga, gb)

    return _make("mul", _as_array(a) * _as_array(b), (a, b), vjp)


def scalar_mul(a, c: float) -> Tensor:
    c = float(c)
    return _make("scalar_mul", _as_array(a) * c, (a,), lambda g: (scalar_mul(g, c),))


def add_const(a, c: float) -> Tensor:
    c = float(c)
    return _make("add_const", _as_array(a) + c, (a,), lambda g: (g,))


def scale(a, s) -> Tensor:
    """Multiply tensor ``a`` by a scalar that may itself be a tape tensor."""
    if not isinstance(s, Tensor):
        return scalar_mul(a, float(s))
    if s.data.size != 1:
        raise ShapeError(f"scale: scale factor must be scalar, got {s.data.shape}")

    def vjp(g):
        ga = scale(g, s) if isinstance(a, Tensor) else None
        gs = reshape(sum_all(mul(g, a)), s.data.shape)
        return (ga, gs)

    return _make("scale", _as_array(a) * float(s.data), (a, s), vjp)


def matmul(a, b) -> Tensor:
    da, db = _as_array(a), _as_array(b)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {da.shape} @ {db.shape}")

    def vjp(g):
        ga = matmul(g, transpose(b)) if isinstance(a, Tensor) else None
        gb = matmul(transpose(a), g) if isinstance(b, Tensor) else None
        return (ga, gb)

    return _make("matmul", da @ db, (a, b), vjp)


def transpose(a) -> Tensor:
    da = _as_array(a)
    if da.ndim != 2:
        raise ShapeError(f"transpose expects 2-D, got {da.shape}")
    return _make("transpose", da.T, (a,), lambda g: (transpose(g),), check=False)


def reshape(a, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    da = _as_array(a)
    if math.prod(shape) != da.size:
        raise ShapeError(f"reshape: cannot view {da.shape} as {shape}")
    old = da.shape
    return _make("reshape", da.reshape(shape), (a,), lambda g: (reshape(g, old),), check=False)


def concat(parts: Sequence, axis: int) -> Tensor:
    arrays = [_as_array(p) for p in parts]
    sizes = [arr.shape[axis] for arr in arrays]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            narrow(g, axis, int(offsets[i]), sizes[i]) if isinstance(p, Tensor) else None
            for i, p in enumerate(parts)
        )

    return _make("concat", np.concatenate(arrays, axis=axis), tuple(parts), vjp, check=False)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    da = _as_array(a)
    axis = axis % da.ndim
    if start < 0 or start + length > da.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of bounds for axis {axis} of {da.shape}"
        )
    idx = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(da.ndim))
    full = da.shape[axis]

    def vjp(g):
        return (embed(g, axis, start, full),)

    return _make("narrow", da[idx], (a,), vjp, check=False)


def embed(a, axis: int, start: int, full: int) -> Tensor:
    """Place ``a`` into a zero tensor whose ``axis`` has size ``full``."""
    da = _as_array(a)
    axis = axis % da.ndim
    length = da.shape[axis]
    out_shape = tuple(full if d == axis else s for d, s in enumerate(da.shape))
    out = np.zeros(out_shape)
    idx = tuple(slice(None) if d != axis else slice(start, start + length) for d in range(da.ndim))
    out[idx] = da

    def vjp(g):
        return (narrow(g, axis, start, length),)

    return _make("embed", out, (a,), vjp, check=False)


def broadcast_to(a, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    da = _as_array(a)
    old = da.shape

    def vjp(g):
        return (sum_to(g, old),)

    return _make("broadcast_to", np.broadcast_to(da, shape), (a,), vjp, check=False)


def sum_to(a, shape) -> Tensor:
    """Reduce by summation down to ``shape`` (adjoint of broadcast_to)."""
    shape = tuple(int(s) for s in shape)
    da = _as_array(a)
    out = da
    while out.ndim > len(shape):
        out = out.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and out.shape[ax] != 1:
            out = out.sum(axis=ax, keepdims=True)
    if out.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {da.shape} to {shape}")
    old = da.shape

    def vjp(g):
        return (broadcast_to(g, old),)

    return _make("sum_to", out, (a,), vjp)


def sum_all(a) -> Tensor:
    da = _as_array(a)
    old = da.shape

    def vjp(g):
        return (broadcast_to(reshape(g, (1,) * len(old)) if old else g, old),)

    return _make("sum", np.asarray(da.sum()), (a,), vjp)


def sum_axes(a, axes, keepdims: bool = False) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    da = _as_array(a)
    axes = tuple(ax % da.ndim for ax in axes)
    old = da.shape
    kept = tuple(1 if d in axes else s for d, s in enumerate(old))

    def vjp(g):
        gk = g if keepdims else reshape(g, kept)
        return (broadcast_to(gk, old),)

    return _make("sum_axes", da.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean_axes(a, axes, keepdims: bool = False) -> Tensor:
    if isinstance(axes, int):
        axes = (axes,)
    da = _as_array(a)
    n = math.prod(da.shape[ax % da.ndim] for ax in axes)
    return scalar_mul(sum_axes(a, axes, keepdims), 1.0 / n)


def max_axis(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; ties resolved to the lowest index (deterministic)."""
    da = _as_array(a)
    axis = axis % da.ndim
    idx = np.argmax(da, axis=axis)  # first occurrence on ties
    mask = np.zeros_like(da)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    out = np.take_along_axis(da, np.expand_dims(idx, axis), axis=axis)
    kept_shape = out.shape
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gk = g if keepdims else reshape(g, kept_shape)
        return (mul(broadcast_to(gk, da.shape), mask),)

    return _make("max_axis", out, (a,), vjp)


def exp(a) -> Tensor:
    out_holder = {}

    def vjp(g):
        return (mul(g, out_holder["t"]),)

    t = _make("exp", np.exp(_as_array(a)), (a,), vjp)
    out_holder["t"] = t
    return t


def log(a) -> Tensor:
    def vjp(g):
        return (mul(g, pow_const(a, -1.0)),)

    da = _as_array(a)
    if np.any(da <= 0):
        raise NumericalError("log of non-positive value")
    return _make("log", np.log(da), (a,), vjp)


def pow_const(a, p: float) -> Tensor:
    p = float(p)

    def vjp(g):
        return (scalar_mul(mul(g, pow_const(a, p - 1.0)), p),)

    return _make("pow", _as_array(a) ** p, (a,), vjp)


def relu(a) -> Tensor:
    da = _as_array(a)
    mask = (da > 0).astype(np.float64)
    return _make("relu", da * mask, (a,), lambda g: (mul(g, mask),), check=False)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    da = _as_array(a)
    mask = np.where(da > 0, 1.0, float(slope))
    return _make("leaky_relu", da * mask, (a,), lambda g: (mul(g, mask),), check=False)


def sigmoid(a) -> Tensor:
    out_holder = {}

    def vjp(g):
        t = out_holder["t"]
        return (mul(g, mul(t, add_const(neg(t), 1.0))),)

    da = _as_array(a)
    with np.errstate(over="ignore"):
        val = np.where(da >= 0, 1.0 / (1.0 + np.exp(-da)), np.exp(da) / (1.0 + np.exp(da)))
    t = _make("sigmoid", val, (a,), vjp)
    out_holder["t"] = t
    return t


# -- 1-D convolution (stride 1) and its two gradient kernels ----------------
#
# conv1d is bilinear in (x, w); its input- and weight-gradients are bilinear
# too, and the three operators are mutual adjoints. Expressing each backward
# in terms of the other two keeps arbitrarily-deep double differentiation
# exact.


def _conv_windows(arr: Array, k: int, pad: int) -> Array:
    if pad:
        arr = np.pad(arr, ((0, 0), (0, 0), (pad, pad)))
    return np.lib.stride_tricks.sliding_window_view(arr, k, axis=2)


def conv1d(x, w, padding: int = 1) -> Tensor:
    dx, dw = _as_array(x), _as_array(w)
    if dx.ndim != 3 or dw.ndim != 3:
        raise ShapeError(f"conv1d expects (B,Cin,L) and (Cout,Cin,K), got {dx.shape}, {dw.shape}")
    if dx.shape[1] != dw.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch {dx.shape[1]} vs {dw.shape[1]}")
    k = dw.shape[2]
    l_out = dx.shape[2] + 2 * padding - k + 1
    if l_out < 1:
        raise ShapeError("conv1d: output length < 1")
    win = _conv_windows(dx, k, padding)  # (B, Cin, L_out, K)
    out = np.tensordot(win, dw, axes=([1, 3], [1, 2])).transpose(0, 2, 1)

    def vjp(g):
        gx = conv1d_grad_x(g, w, padding, dx.shape[2]) if isinstance(x, Tensor) else None
        gw = conv1d_grad_w(g, x, padding, k) if isinstance(w, Tensor) else None
        return (gx, gw)

    return _make("conv1d", out, (x, w), vjp)


def conv1d_grad_x(g, w, padding: int, l_in: int) -> Tensor:
    """Adjoint of conv1d in its first argument: gives dL/dx from dL/dout."""
    dg, dw = _as_array(g), _as_array(w)
    k = dw.shape[2]
    # full correlation with the flipped, transposed kernel
    wt = dw[:, :, ::-1].transpose(1, 0, 2)  # (Cin, Cout, K)
    win = _conv_windows(dg, k, k - 1 - padding)  # (B, Cout, L_in, K)
    out = np.tensordot(win, wt, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if out.shape[2] != l_in:
        raise ShapeError("conv1d_grad_x: length mismatch")

    def vjp(u):
        gg = conv1d(u, w, padding) if isinstance(g, Tensor) else None
        gw = conv1d_grad_w(g, u, padding, k) if isinstance(w, Tensor) else None
        return (gg, gw)

    return _make("conv1d_gx", out, (g, w), vjp)


def conv1d_grad_w(g, x, padding: int, k: int) -> Tensor:
    """Adjoint of conv1d in its second argument: gives dL/dw from dL/dout."""
    dg, dx = _as_array(g), _as_array(x)
    win = _conv_windows(dx, k, padding)  # (B, Cin, L_out, K)
    out = np.tensordot(dg, win, axes=([0, 2], [0, 2]))  # (Cout, Cin, K)

    def vjp(u):
        gg = conv1d(x, u, padding) if isinstance(g, Tensor) else None
        gx = conv1d_grad_x(g, u, padding, dx.shape[2]) if isinstance(x, Tensor) else None
        return (gg, gx)

    return _make("conv1d_gw", out, (g, x), vjp)


# ---------------------------------------------------------------------------
# composite ops
# ---------------------------------------------------------------------------


def squared_l2(a) -> Tensor:
    """Sum of squared entries, as a scalar tensor."""
    return sum_all(mul(a, a))


def max_pool1d(a, window: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last axis; trailing remainder dropped."""
    da = _as_array(a)
    b, c, l = da.shape
    t = l // window
    if t < 1:
        raise ShapeError(f"max_pool1d: length {l} shorter than window {window}")
    x = narrow(a, 2, 0, t * window) if t * window != l else a
    x = reshape(x, (b, c, t, window))
    return max_axis(x, 3)


def mean_pool1d(a, window: int = 2) -> Tensor:
    da = _as_array(a)
    b, c, l = da.shape
    t = l // window
    if t < 1:
        raise ShapeError(f"mean_pool1d: length {l} shorter than window {window}")
    x = narrow(a, 2, 0, t * window) if t * window != l else a
    x = reshape(x, (b, c, t, window))
    return mean_axes(x, (3,))


def global_avg_pool(a) -> Tensor:
    """(B, C, L) -> (B, C) by averaging over time."""
    return mean_axes(a, (2,))


def _normalize(x, axes, eps: float) -> Tensor:
    mu = mean_axes(x, axes, keepdims=True)
    xc = sub(x, broadcast_to(mu, _as_array(x).shape))
    var = mean_axes(mul(xc, xc), axes, keepdims=True)
    inv = pow_const(add_const(var, eps), -0.5)
    return mul(xc, broadcast_to(inv, _as_array(x).shape))


def _affine(y, gamma, beta, channel_axis: int):
    if gamma is None:
        return y
    shape = _as_array(y).shape
    gshape = tuple(shape[channel_axis] if d == channel_axis else 1 for d in range(len(shape)))
    g = broadcast_to(reshape(gamma, gshape), shape)
    b = broadcast_to(reshape(beta, gshape), shape)
    return add(mul(y, g), b)


def batch_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalization with batch statistics (per feature/channel over the batch).

    Accepts (B, F) or (B, C, L); stats are over the batch (and time) axes.
    Pure function of the input: nothing is carried between calls.
    """
    ndim = _as_array(x).ndim
    axes = (0,) if ndim == 2 else (0, 2)
    return _affine(_normalize(x, axes, eps), gamma, beta, 1)


def instance_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over time; (B, C, L) only."""
    if _as_array(x).ndim != 3:
        raise ShapeError("instance_norm expects (B, C, L)")
    return _affine(_normalize(x, (2,), eps), gamma, beta, 1)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over all non-batch axes."""
    ndim = _as_array(x).ndim
    axes = tuple(range(1, ndim))
    return _affine(_normalize(x, axes, eps), gamma, beta, 1)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (B, K) logits against integer labels (B,)."""
    dl = _as_array(logits)
    if dl.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K), got {dl.shape}")
    labels = np.asarray(labels)
    b, k = dl.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ShapeError("label id out of range")
    # constant shift for stability; exact because it cancels in lse - picked
    shift = dl.max(axis=1, keepdims=True)
    z = add(logits, np.broadcast_to(-shift, dl.shape).copy())
    lse = log(sum_axes(exp(z), (1,), keepdims=True))  # (B, 1)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = sum_axes(mul(z, onehot), (1,), keepdims=True)
    return scalar_mul(sum_all(sub(lse, picked)), 1.0 / b)


def traced_sgd_step(params, grads, lr) -> Tensor:
    """One SGD update ``params - lr * grads`` kept on the tape.

    Gradients of downstream losses flow back into all three operands,
    including a learnable scalar learning rate.
    """
    _same_shape("traced_sgd_step", params, grads)
    return sub(params, scale(grads, lr))


# ---------------------------------------------------------------------------
# op registry (uniform dispatch by kind name)
# ---------------------------------------------------------------------------

OP_KINDS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "scalar-mul": scalar_mul,
    "elementwise-mul": mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "relu": relu,
    "leaky-relu": leaky_relu,
    "sigmoid": sigmoid,
    "max-pool-1d": max_pool1d,
    "mean-pool-1d": mean_pool1d,
    "global-average-pool": global_avg_pool,
    "batch-norm": batch_norm,
    "instance-norm": instance_norm,
    "layer-norm": layer_norm,
    "reshape": reshape,
    "concat": concat,
    "slice": narrow,
    "mean-over-axis": mean_axes,
    "sum": sum_all,
    "squared-l2": squared_l2,
    "softmax-cross-entropy": softmax_cross_entropy,
}


def apply_op(kind: str, *args, **kwargs) -> Tensor:
    """Apply an op by its kind name (see OP_KINDS)."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ShapeError(f"unknown op kind '{kind}'") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# flat parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamLayout:
    """Names and shapes of a model's parameters, in flattening order."""

    entries: tuple[tuple[str, tuple[int, ...]], ...]

    @property
    def size(self) -> int:
        return sum(math.prod(s) for _, s in self.entries)

    def offsets(self) -> list[tuple[str, int, int, tuple[int, ...]]]:
        out, pos = [], 0
        for name, shape in self.entries:
            n = math.prod(shape)
            out.append((name, pos, n, shape))
            pos += n
        return out


@dataclass
class FlatParams:
    """All parameters of one model as a single flat float64 vector."""

    layout: ParamLayout
    data: Array

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 1 or self.data.size != self.layout.size:
            raise ShapeError(
                f"flat data length {self.data.size} does not match layout size {self.layout.size}"
            )

    def unflatten(self) -> dict[str, Array]:
        return {
            name: self.data[pos : pos + n].reshape(shape)
            for name, pos, n, shape in self.layout.offsets()
        }

    @classmethod
    def flatten(cls, layout: ParamLayout, arrays: dict[str, Array]) -> "FlatParams":
        parts = []
        for name, shape in layout.entries:
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"param '{name}': expected shape {shape}, got {arr.shape}")
            parts.append(arr.reshape(-1))
        return cls(layout, np.concatenate(parts) if parts else np.zeros(0))

    def copy(self) -> "FlatParams":
        return FlatParams(self.layout, self.data.copy())


def slice_params(flat, layout: ParamLayout) -> dict[str, Tensor]:
    """Carve a flat parameter tensor into named, shaped views on the tape."""
    if isinstance(flat, FlatParams):
        flat = leaf(flat.data)
    if flat.data.ndim != 1 or flat.data.size != layout.size:
        raise ShapeError(
            f"flat tensor length {flat.data.size} does not match layout size {layout.size}"
        )
    return {
        name: reshape(narrow(flat, 0, pos, n), shape)
        for name, pos, n, shape in layout.offsets()
    }


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(fn: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps one tensor to a scalar tensor and may itself build tapes /
    call backward internally. Error is relative to max(|analytic|,
    |numeric|, 1) per component.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(_as_array(x), dtype=np.float64)

    with Tape():
        xt = leaf(x0)
        y = fn(xt)
        if y.data.size != 1:
            raise TapeError("grad_check target must return a scalar")
        (g,) = backward(y, [xt])
        analytic = np.array(g.data)

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        with Tape():
            up = float(fn(leaf(x0)).data)
        flat[i] = orig - eps
        with Tape():
            down = float(fn(leaf(x0)).data)
        flat[i] = orig
        num_flat[i] = (up - down) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
