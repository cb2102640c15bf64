"""A small reverse-mode differentiation core over numpy arrays.

Only the primitives the acoustic model needs are provided.  Operations are
recorded on the active :class:`Graph` (define-by-run); outside a graph they
run forward only, which is what evaluation uses.

    with Graph() as g:
        loss = sum_all(mul(x, x))
    grads = g.backward(loss, [x])
"""

from __future__ import annotations

import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

_DTYPE = np.float64


def set_precision(bits: int) -> None:
    """Select 64-bit (default) or 32-bit floats for new tensors."""
    global _DTYPE
    if bits == 64:
        _DTYPE = np.float64
    elif bits == 32:
        _DTYPE = np.float32
    else:
        raise ValueError(f"unsupported precision {bits}")


def get_dtype():
    return _DTYPE


class GraphError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    """An array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_graph_stack: List["Graph"] = []


class Graph:
    """Tape of recorded operations.

    Nodes are appended in execution order, so the tape is already a
    topological order and :meth:`backward` walks it in reverse.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.pop()

    def backward(
        self,
        loss: Tensor,
        params: Optional[Sequence[Tensor]] = None,
        seed: Union[float, np.ndarray, None] = None,
    ) -> List[np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf tensor.

        Returns the gradients of ``params`` (zeros for parameters the loss
        does not depend on).
        """
        if not self.nodes or loss.node is None or loss.node.output is not loss:
            raise GraphError("backward called before forward: loss was not recorded on this graph")
        if seed is None:
            if loss.data.size != 1:
                raise GraphError("loss must be a scalar when no seed is given")
            seed = np.ones_like(loss.data)
        grads: Dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.data.dtype)}
        for p in params or ():
            if p.grad is None:
                p.zero_grad()
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node is None:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=t.data.dtype)
                    else:
                        t.grad = t.grad + gi
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
        return [p.grad for p in params or ()]


def _recording(inputs: Sequence[Tensor]) -> Optional[Graph]:
    if not _graph_stack:
        return None
    if any(t.requires_grad for t in inputs):
        return _graph_stack[-1]
    return None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op``.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    External modules use this to register fused primitives.
    """
    out = Tensor(data)
    g = _recording(inputs)
    if g is not None:
        out.requires_grad = True
        out.node = Node(op, inputs, out, backward)
        g.nodes.append(out.node)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e
    return make_op("add", data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e
    return make_op(
        "mul",
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return make_op("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


# reductions and shape -------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    return make_op("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return make_op(
        "mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e
    return make_op("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


# linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op("matmul", a.data @ b.data, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` has shape (in, out)."""
    if x.shape[-1] != w.shape[0] or (b is not None and b.shape != (w.shape[1],)):
        raise ShapeError(
            f"affine: input {x.shape}, weight {w.shape}, bias {None if b is None else b.shape}"
        )
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return make_op("affine", out, inputs, backward)


# normalisation and softmax ---------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return make_op("layer_norm", out, (x, gain, bias), backward)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    zs = z - m
    return zs - np.log(np.exp(zs).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    p = _softmax(x.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_op("softmax", p, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    lp = _log_softmax(x.data, axis)

    def backward(g):
        return (g - np.exp(lp) * g.sum(axis=axis, keepdims=True),)

    return make_op("log_softmax", lp, (x,), backward)


# convolution ----------------------------------------------------------------


def conv_out_len(n: int, kernel: int = 3, stride: int = 2, padding: int = 1) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """2-D convolution of channels-last (B, H, W, C_in) input by (C_out, C_in, k, k) weights.

    Implemented as im2col plus one matrix product; output is (B, H', W', C_out).
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    bsz, h, wd, cin = x.shape
    cout, _, k, k2 = w.shape
    ho = conv_out_len(h, k, stride, padding)
    wo = conv_out_len(wd, k2, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    slices = [
        (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride), slice(None))
        for i in range(k)
        for j in range(k2)
    ]
    cols = np.concatenate([xp[sl] for sl in slices], axis=-1)  # (B, H', W', k*k2*C_in)
    wmat = w.data.transpose(2, 3, 1, 0).reshape(k * k2 * cin, cout)
    out = cols.reshape(-1, k * k2 * cin) @ wmat + b.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.reshape(-1, k * k2 * cin).T @ g2).reshape(k, k2, cin, cout).transpose(3, 2, 0, 1)
        if not x.requires_grad:
            return None, gw, g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, k * k2 * cin)
        gxp = np.zeros_like(xp)
        for n, sl in enumerate(slices):
            gxp[sl] += gcols[..., n * cin : (n + 1) * cin]
        gx = gxp[:, padding : padding + h, padding : padding + wd, :]
        return gx, gw, g2.sum(axis=0)

    return make_op("conv2d", out.reshape(bsz, ho, wo, cout), (x, w, b), backward)


# regularisation and constants -----------------------------------------------


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return x
    if rng is None:
        raise GraphError("dropout in train mode needs an explicit generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return make_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    """Sinusoidal position table of shape (length, d_model)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, d_model, 2, dtype=np.float64) * -(math.log(10000.0) / d_model))
    pe = np.zeros((length, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return pe.astype(_DTYPE)


# composite blocks -------------------------------------------------------------


def feed_forward(x: Tensor, w1, b1, w2, b2, p: float = 0.0, rng=None, train: bool = False) -> Tensor:
    h = relu(affine(x, w1, b1))
    h = dropout(h, p, rng, train)
    return affine(h, w2, b2)


def multi_head_attention(
    x: Tensor,
    wq, bq, wk, bk, wv, bv, wo, bo,
    num_heads: int,
    key_mask: Optional[np.ndarray] = None,
    p: float = 0.0,
    rng=None,
    train: bool = False,
) -> Tensor:
    """Scaled dot-product self-attention over (B, T, D) with ``num_heads`` heads.

    ``key_mask`` is a boolean (B, T) array, True for valid frames.
    """
    bsz, t, d = x.shape
    if d % num_heads:
        raise ShapeError(f"attention: d_model {d} not divisible by {num_heads} heads")
    dk = d // num_heads

    def split(z):
        return transpose(reshape(z, (bsz, t, num_heads, dk)), (0, 2, 1, 3))

    q = split(affine(x, wq, bq))
    k = split(affine(x, wk, bk))
    v = split(affine(x, wv, bv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    if key_mask is not None:
        bias = np.where(key_mask[:, None, None, :], 0.0, -np.inf).astype(scores.data.dtype)
        scores = add(scores, bias)
    attn = dropout(softmax(scores, axis=-1), p, rng, train)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (bsz, t, d))
    return affine(ctx, wo, bo)


# gradient validation ----------------------------------------------------------


def finite_diff_check(
    fn: Callable[[], Tensor],
    param: Tensor,
    epsilon: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between backward and central differences for ``param``.

    ``fn`` rebuilds the scalar loss from scratch on every call.  With
    ``max_entries`` only a random subset of coordinates is probed.  The
    denominator is clamped at ``floor`` so that exactly-zero gradients are
    not judged on round-off.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if param.data.size == 0:
        raise ShapeError("parameter has no entries")
    with Graph() as g:
        loss = fn()
    if loss.data.size != 1:
        raise GraphError("finite_diff_check needs a scalar loss")
    param.grad = None
    (analytic,) = g.backward(loss, [param])
    analytic = analytic.copy()

    flat = param.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = rng.choice(flat.size, size=max_entries, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = float(fn().data)
        flat[i] = orig - epsilon
        fm = float(fn().data)
        flat[i] = orig
        numeric = (fp - fm) / (2 * epsilon)
        a = float(analytic.reshape(-1)[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
