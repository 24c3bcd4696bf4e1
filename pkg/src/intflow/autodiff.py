"""Minimal reverse-mode tape with configurable straight-through rounding.

The differentiation engine is an array-valued graph of :class:`Node` objects,
each holding a float64 forward value and a closure that scatters its adjoint
into its parents.  Ops accept either nodes or plain numpy arrays/scalars;
plain inputs are treated as constants and never get gradients, which keeps the
graphs small.

The one non-standard piece is :func:`round_to_grid`: a quantizer whose forward
function (identity / hard round / soft round / stochastic round) and backward
substitute (identity / soft-round derivative / zero) are chosen independently,
so the same model code can run as a continuous density model, a hard-rounded
integer flow trained straight-through, or anything in between.

Numeric kernels (``conv2d_value`` and friends) are plain-numpy and shared by
the tape ops and the tape-free evaluation paths, so both routes compute
bit-identical values.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, UsageError

Array = np.ndarray

ROUND_FORWARD_MODES = ("identity", "hard_round", "soft_round", "stochastic")
ROUND_BACKWARD_MODES = ("identity", "soft_round_derivative", "hard_zero")


class Node:
    """One tape entry: forward value plus a backward closure."""

    __slots__ = ("value", "parents", "backward_fn", "adjoint")

    def __init__(self, value: Array, parents: tuple = (), backward_fn: Callable | None = None):
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.adjoint: Array | None = None


class Parameter(Node):
    """Named leaf node whose value persists across tapes (model weights)."""

    __slots__ = ("name",)

    def __init__(self, value: Array, name: str):
        super().__init__(np.array(value, dtype=np.float64))
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.value.shape})"


def value_of(x) -> Array:
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _accum(node: Node, delta: Array) -> None:
    if node.adjoint is None:
        node.adjoint = delta.copy() if isinstance(delta, np.ndarray) else np.asarray(delta, dtype=np.float64)
    else:
        node.adjoint = node.adjoint + delta


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _topo_order(loss: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate adjoints of everything reachable from ``loss``."""
    order = _topo_order(loss)
    for node in order:
        node.adjoint = None
    loss.adjoint = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.adjoint is not None:
            node.backward_fn(node.adjoint)


def gradient(loss: Node, params: Sequence[Parameter]) -> list[Array]:
    """Adjoints of ``loss`` w.r.t. each parameter (order preserved)."""
    backward(loss)
    grads = []
    for p in params:
        if p.adjoint is None:
            raise UsageError(f"parameter {p.name!r} does not appear on the tape of this loss")
        grads.append(p.adjoint)
    return grads


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _binary(a, b, out: Array, da: Callable | None, db: Callable | None) -> Node:
    parents = tuple(x for x in (a, b) if isinstance(x, Node))
    if not parents:
        return Node(out)

    def bw(adj: Array) -> None:
        if isinstance(a, Node) and da is not None:
            _accum(a, _unbroadcast(da(adj), a.value.shape))
        if isinstance(b, Node) and db is not None:
            _accum(b, _unbroadcast(db(adj), b.value.shape))

    return Node(out, parents, bw)


def add(a, b) -> Node:
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b) -> Node:
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b) -> Node:
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def _unary(x, out: Array, dx: Callable) -> Node:
    if not isinstance(x, Node):
        return Node(out)

    def bw(adj: Array) -> None:
        _accum(x, dx(adj))

    return Node(out, (x,), bw)


def neg(x) -> Node:
    return _unary(x, -value_of(x), lambda g: -g)


def relu(x) -> Node:
    xv = value_of(x)
    out = np.maximum(xv, 0.0)
    return _unary(x, out, lambda g: g * (xv > 0.0))


def sigmoid(x) -> Node:
    s = sigmoid_value(value_of(x))
    return _unary(x, s, lambda g: g * s * (1.0 - s))


def swish(x) -> Node:
    xv = value_of(x)
    s = sigmoid_value(xv)
    return _unary(x, xv * s, lambda g: g * s * (1.0 + xv * (1.0 - s)))


def exp(x) -> Node:
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x) -> Node:
    xv = value_of(x)
    return _unary(x, np.log(xv), lambda g: g / xv)


def softplus(x) -> Node:
    xv = value_of(x)
    out = softplus_value(xv)
    s = sigmoid_value(xv)
    return _unary(x, out, lambda g: g * s)


def clamp_min(x, lo: float) -> Node:
    xv = value_of(x)
    mask = xv >= lo
    return _unary(x, np.maximum(xv, lo), lambda g: g * mask)


def where_mask(mask: Array, a, b) -> Node:
    """Select per element by a constant boolean mask (non-differentiable switch)."""
    out = np.where(mask, value_of(a), value_of(b))
    return _binary(a, b, out, lambda g: g * mask, lambda g: g * ~mask)


def concat(parts: Iterable, axis: int = -1) -> Node:
    parts = list(parts)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    node_parents = tuple(p for p in parts if isinstance(p, Node))
    if not node_parents:
        return Node(out)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bw(adj: Array) -> None:
        moved = np.moveaxis(adj, axis, -1)
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(p, Node):
                _accum(p, np.moveaxis(moved[..., lo:hi], -1, axis))

    return Node(out, node_parents, bw)


def narrow(x, start: int, size: int, axis: int = -1) -> Node:
    xv = value_of(x)
    index = [slice(None)] * xv.ndim
    index[axis] = slice(start, start + size)
    index = tuple(index)
    out = xv[index]
    if not isinstance(x, Node):
        return Node(out)

    def bw(adj: Array) -> None:
        full = np.zeros_like(xv)
        full[index] = adj
        _accum(x, full)

    return Node(out, (x,), bw)


def sum_all(x) -> Node:
    xv = value_of(x)
    return _unary(x, np.asarray(xv.sum()), lambda g: np.broadcast_to(g, xv.shape))


def expand_dims(x, axis: int) -> Node:
    xv = value_of(x)
    return _unary(x, np.expand_dims(xv, axis), lambda g: np.squeeze(g, axis=axis))


def permute_last(x, perm: np.ndarray, inv: np.ndarray) -> Node:
    """Reorder the trailing axis by ``perm``; ``inv`` must be its inverse."""
    xv = value_of(x)
    return _unary(x, xv[..., perm], lambda g: g[..., inv])


def array_bijection(x, fwd, inv) -> Node:
    """Lift an element-permuting reshape onto the tape.

    ``fwd`` rearranges the array without mixing values and ``inv`` must be
    its exact inverse; the gradient is the inverse rearrangement.
    """
    xv = value_of(x)
    return _unary(x, fwd(xv), lambda g: inv(g))


def logsumexp(x, axis: int = -1) -> Node:
    xv = value_of(x)
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp(xv - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def dx(g: Array) -> Array:
        return np.expand_dims(g, axis) * soft

    return _unary(x, out, dx)


# ---------------------------------------------------------------------------
# numeric kernels (shared by tape ops and tape-free evaluation)
# ---------------------------------------------------------------------------


def sigmoid_value(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_value(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def logsumexp_value(x: Array, axis: int = -1) -> Array:
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def _conv_windows(x: Array, kh: int, kw: int) -> Array:
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (B, H, W, Cin, kh, kw)
    return sliding_window_view(xp, (kh, kw), axis=(1, 2))


def conv2d_value(x: Array, kernel: Array, bias: Array | None) -> Array:
    """Same-padding stride-1 convolution, NHWC, kernel (kh, kw, Cin, Cout)."""
    kh, kw, cin, cout = kernel.shape
    if kh == 1 and kw == 1:
        b, h, w, _ = x.shape
        out = (x.reshape(-1, cin) @ kernel[0, 0]).reshape(b, h, w, cout)
    else:
        win = _conv_windows(x, kh, kw)
        out = np.einsum("bhwcij,ijco->bhwo", win, kernel, optimize=True)
    if bias is not None:
        out = out + bias
    return out


def layer_norm_value(x: Array, gain: Array, bias: Array, eps: float) -> Array:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    return xc * inv * gain + bias


def group_norm_value(x: Array, gain: Array, bias: Array, groups: int, eps: float) -> Array:
    b, h, w, c = x.shape
    xr = x.reshape(b, h, w, groups, c // groups)
    axes = (1, 2, 4)
    mu = xr.mean(axis=axes, keepdims=True)
    xc = xr - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    return (xc * inv).reshape(b, h, w, c) * gain + bias


# ---------------------------------------------------------------------------
# layer-sized tape ops
# ---------------------------------------------------------------------------


def conv2d(x, kernel: Node, bias: Node | None) -> Node:
    xv = value_of(x)
    kv = value_of(kernel)
    bv = value_of(bias) if bias is not None else None
    kh, kw, cin, cout = kv.shape
    out = conv2d_value(xv, kv, bv)
    parents = tuple(p for p in (x, kernel, bias) if isinstance(p, Node))

    def bw(adj: Array) -> None:
        if isinstance(bias, Node):
            _accum(bias, adj.sum(axis=(0, 1, 2)))
        if kh == 1 and kw == 1:
            if isinstance(kernel, Node):
                dk = np.tensordot(xv, adj, axes=([0, 1, 2], [0, 1, 2]))
                _accum(kernel, dk[None, None])
            if isinstance(x, Node):
                _accum(x, adj @ kv[0, 0].T)
        else:
            win = _conv_windows(xv, kh, kw)
            if isinstance(kernel, Node):
                _accum(kernel, np.einsum("bhwcij,bhwo->ijco", win, adj, optimize=True))
            if isinstance(x, Node):
                flipped = kv[::-1, ::-1].transpose(0, 1, 3, 2)
                _accum(x, conv2d_value(adj, flipped, None))

    return Node(out, parents, bw)


def layer_norm(x, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    xv = value_of(x)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = value_of(gain)
    out = xhat * gv + value_of(bias)
    parents = tuple(p for p in (x, gain, bias) if isinstance(p, Node))
    n = xv.shape[-1]

    def bw(adj: Array) -> None:
        if isinstance(bias, Node):
            _accum(bias, adj.reshape(-1, n).sum(axis=0))
        if isinstance(gain, Node):
            _accum(gain, (adj * xhat).reshape(-1, n).sum(axis=0))
        if isinstance(x, Node):
            dxhat = adj * gv
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    return Node(out, parents, bw)


def group_norm(x, gain: Node, bias: Node, groups: int, eps: float = 1e-5) -> Node:
    xv = value_of(x)
    b, h, w, c = xv.shape
    cg = c // groups
    xr = xv.reshape(b, h, w, groups, cg)
    axes = (1, 2, 4)
    mu = xr.mean(axis=axes, keepdims=True)
    xc = xr - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv
    gv = value_of(gain)
    out = xhat.reshape(b, h, w, c) * gv + value_of(bias)
    parents = tuple(p for p in (x, gain, bias) if isinstance(p, Node))

    def bw(adj: Array) -> None:
        if isinstance(bias, Node):
            _accum(bias, adj.sum(axis=(0, 1, 2)))
        xhat_flat = xhat.reshape(b, h, w, c)
        if isinstance(gain, Node):
            _accum(gain, (adj * xhat_flat).sum(axis=(0, 1, 2)))
        if isinstance(x, Node):
            dxhat = (adj * gv).reshape(b, h, w, groups, cg)
            m1 = dxhat.mean(axis=axes, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
            dx = inv * (dxhat - m1 - xhat * m2)
            _accum(x, dx.reshape(b, h, w, c))

    return Node(out, parents, bw)


# ---------------------------------------------------------------------------
# rounding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundingConfig:
    """Forward function and backward substitute for the quantizer."""

    forward: str = "hard_round"
    backward: str = "identity"
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.forward not in ROUND_FORWARD_MODES:
            raise ParameterError(f"unknown forward mode {self.forward!r}")
        if self.backward not in ROUND_BACKWARD_MODES:
            raise ParameterError(f"unknown backward mode {self.backward!r}")
        if not 0.0 < self.temperature <= 1.0:
            raise ParameterError(f"temperature must be in (0, 1], got {self.temperature}")


def round_half_up(x: Array) -> Array:
    """The tie rule used everywhere: round half away from minus infinity."""
    return np.floor(x + 0.5)


def soft_round(x, temperature: float):
    """Smooth monotone surrogate for rounding; exact at integers.

    Normalized so that each unit cell maps onto itself: the sigmoid ramp over
    the cell is shifted and rescaled to hit both integer endpoints exactly,
    which keeps the function continuous and identity-like at temperature 1.
    """
    if not 0.0 < temperature <= 1.0:
        raise ParameterError(f"temperature must be in (0, 1], got {temperature}")
    xv = np.asarray(x, dtype=np.float64)
    base = np.floor(xv)
    frac = xv - base
    lo = sigmoid_value(np.asarray(-1.0 / temperature))
    hi = sigmoid_value(np.asarray(1.0 / temperature))
    ramp = sigmoid_value((2.0 * frac - 1.0) / temperature)
    out = base + (ramp - lo) / (hi - lo)
    return out if isinstance(x, np.ndarray) else float(out)


def soft_round_derivative(x, temperature: float):
    if not 0.0 < temperature <= 1.0:
        raise ParameterError(f"temperature must be in (0, 1], got {temperature}")
    xv = np.asarray(x, dtype=np.float64)
    frac = xv - np.floor(xv)
    lo = sigmoid_value(np.asarray(-1.0 / temperature))
    hi = sigmoid_value(np.asarray(1.0 / temperature))
    s = sigmoid_value((2.0 * frac - 1.0) / temperature)
    out = (2.0 / temperature) * s * (1.0 - s) / (hi - lo)
    return out if isinstance(x, np.ndarray) else float(out)


def round_to_grid(x, bits: int, cfg: RoundingConfig, rng: np.random.Generator | None = None) -> Node:
    """Quantize real values to the lattice ``Z / 2**bits`` (straight-through).

    The forward output is ``f(x * 2**bits) / 2**bits`` with ``f`` chosen by
    ``cfg.forward``; the backward pass multiplies the incoming adjoint by the
    derivative of the ``cfg.backward`` substitute evaluated at the
    pre-quantized (scaled) input.
    """
    xv = value_of(x)
    scale = float(2**bits)
    scaled = xv * scale
    if cfg.forward == "identity":
        out = xv
    elif cfg.forward == "hard_round":
        out = round_half_up(scaled) / scale
    elif cfg.forward == "soft_round":
        out = soft_round(scaled, cfg.temperature) / scale
    else:  # stochastic
        if rng is None:
            raise ParameterError("stochastic rounding requires an rng")
        out = np.floor(scaled + rng.random(scaled.shape)) / scale

    if not isinstance(x, Node):
        return Node(out)
    if cfg.backward == "identity":
        return _unary(x, out, lambda g: g)
    if cfg.backward == "hard_zero":
        return Node(out)  # no parents: gradient is exactly zero
    mult = soft_round_derivative(scaled, cfg.temperature)
    return _unary(x, out, lambda g: g * mult)


# ---------------------------------------------------------------------------
# gradient checking utilities
# ---------------------------------------------------------------------------


def finite_diff_gradient(loss_fn: Callable[[], float], params: Sequence[Parameter], eps: float) -> list[Array]:
    """Per-coordinate central differences of ``loss_fn`` w.r.t. ``params``.

    ``loss_fn`` is evaluated with each coordinate displaced by plus/minus
    ``eps`` while every other coordinate is held fixed; it must read the
    parameters' current values and be deterministic for a fixed batch.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    grads = []
    for p in params:
        flat = p.value.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * eps)
        grads.append(g.reshape(p.value.shape))
    return grads


def flatten_arrays(arrays: Iterable[Array]) -> Array:
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])


def cosine_agreement(g, g_fd) -> float:
    """Cosine of the angle between two gradients; NaN if either is zero."""
    a = flatten_arrays(g) if not isinstance(g, np.ndarray) or g.ndim != 1 else np.asarray(g, dtype=np.float64)
    b = flatten_arrays(g_fd) if not isinstance(g_fd, np.ndarray) or g_fd.ndim != 1 else np.asarray(g_fd, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"gradient lengths differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return float("nan")
    return float(np.dot(a, b) / (na * nb))


def params_vector(params: Sequence[Parameter]) -> Array:
    return flatten_arrays([p.value for p in params])


def set_params_vector(params: Sequence[Parameter], vec: Array) -> None:
    offset = 0
    for p in params:
        n = p.value.size
        p.value[...] = vec[offset : offset + n].reshape(p.value.shape)
        offset += n
    if offset != vec.size:
        raise UsageError(f"vector length {vec.size} does not match parameters ({offset})")
