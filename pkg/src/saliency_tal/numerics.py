"""Dense tensors with reverse-mode differentiation, on top of numpy.

Only the handful of primitives the localization model needs are provided.
Each op computes its forward value eagerly and, when any input requires a
gradient, records a closure that maps the output gradient to input
gradients.  ``Tensor.backward`` replays those closures in reverse
topological order.

Two precision modes exist: 32-bit (training, inference, benchmarks) and
64-bit (gradient checks and oracle tests).  New tensors take the dtype of the
active mode.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True


def get_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float width."""
    old = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = old


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
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

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in reversed(node._parents):
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: tuple, b: tuple) -> tuple:
    # only scalars and leading-dimension broadcasting (bias-style) are allowed
    if a == b:
        return a
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ValueError(f"shape mismatch: {a} vs {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, (a, b), backward)


def power(x: Tensor, p: float) -> Tensor:
    out = x.data ** p

    def backward(g):
        return (g * p * x.data ** (p - 1),)

    return _result(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def softplus(x: Tensor) -> Tensor:
    out = _softplus(x.data)
    return _result(out, (x,), lambda g: (g * _sigmoid(x.data),))


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh form."""
    c = math.sqrt(2.0 / math.pi)
    z = x.data
    inner = c * (z + 0.044715 * z ** 3)
    th = np.tanh(inner)
    out = 0.5 * z * (1.0 + th)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * z ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * z * (1.0 - th ** 2) * dinner),)

    return _result(out, (x,), backward)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _result(out, (a, b), lambda g: (g * pick_a, g * ~pick_a))


def mask_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the rows (second-to-last axis) where ``mask`` is False."""
    m = np.asarray(mask, dtype=x.data.dtype)[..., None]
    if m.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"mask shape {np.shape(mask)} does not match rows of {x.shape}")
    return _result(x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or with matching leading dims on both sides."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k, n = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked-out entries are exactly zero."""
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {z.shape}")
        if not mask.any(axis=-1).all():
            raise ValueError("softmax over a fully masked row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: {x.shape} vs {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), backward)


# ---------------------------------------------------------------- convolution / pooling


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int | None = None, depthwise: bool = False) -> Tensor:
    """Temporal convolution over ``x[..., T, d_in]``.

    ``weight`` is ``[width, d_in, d_out]``, or ``[width, d]`` when ``depthwise``.
    ``padding=None`` means "same" padding and needs an odd width.
    """
    width = weight.shape[0]
    d_in = x.shape[-1]
    if depthwise:
        if weight.ndim != 2 or weight.shape[1] != d_in:
            raise ValueError(f"depthwise kernel {weight.shape} does not match input {x.shape}")
    elif weight.ndim != 3 or weight.shape[1] != d_in:
        raise ValueError(f"conv kernel {weight.shape} does not match input {x.shape}")
    if padding is None:
        if width % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel width, got {width}")
        padding = width // 2
    T = x.shape[-2]
    t_out = (T + 2 * padding - width) // stride + 1
    if t_out < 1:
        raise ValueError(f"conv1d output length {t_out} < 1 for T={T}, width={width}")
    pad_spec = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    span = (t_out - 1) * stride + 1
    taps = [xp[..., k:k + span:stride, :] for k in range(width)]

    if depthwise:
        out = taps[0] * weight.data[0]
        for k in range(1, width):
            out = out + taps[k] * weight.data[k]
    else:
        out = taps[0] @ weight.data[0]
        for k in range(1, width):
            out = out + taps[k] @ weight.data[k]
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        lead = tuple(range(g.ndim - 1))
        for k in range(width):
            sl = (Ellipsis, slice(k, k + span, stride), slice(None))
            if depthwise:
                gxp[sl] += g * weight.data[k]
                gw[k] = (g * taps[k]).sum(axis=lead)
            else:
                gxp[sl] += g @ weight.data[k].T
                gw[k] = taps[k].reshape(-1, d_in).T @ g.reshape(-1, g.shape[-1])
        gx = gxp[..., padding:padding + T, :]
        gb = g.sum(axis=lead) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def max_pool2(x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Width-2, stride-2 max pooling along time that ignores invalid rows.

    An output row is valid iff either input row is; fully invalid pairs give 0.
    """
    T = x.shape[-2]
    if T % 2:
        raise ValueError(f"max_pool2 needs an even length, got T={T}")
    mask = np.asarray(mask, dtype=bool)
    a, b = x.data[..., 0::2, :], x.data[..., 1::2, :]
    ma, mb = mask[..., 0::2, None], mask[..., 1::2, None]
    # take b only when it is valid and (a invalid or b strictly larger)
    take_b = mb & (~ma | (b > a))
    take_a = ma & ~take_b
    out = np.where(take_b, b, np.where(take_a, a, 0.0)).astype(x.data.dtype)
    new_mask = mask[..., 0::2] | mask[..., 1::2]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., 0::2, :] = g * take_a
        gx[..., 1::2, :] = g * take_b
        return (gx,)

    return _result(out, (x,), backward), new_mask


# ---------------------------------------------------------------- local windows


def local_scores(q: Tensor, k: Tensor, window: int) -> Tensor:
    """``s[..., t, w] = q[..., t, :] . k[..., t + w - window//2, :]``.

    Out-of-range keys read zeros; callers mask them.
    """
    if q.shape != k.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {k.shape}")
    r = window // 2
    T = q.shape[-2]
    pad_spec = [(0, 0)] * (k.ndim - 2) + [(r, r), (0, 0)]
    kp = np.pad(k.data, pad_spec)
    out = np.empty(q.shape[:-1] + (window,), dtype=q.data.dtype)
    for w in range(window):
        out[..., w] = np.einsum("...td,...td->...t", q.data, kp[..., w:w + T, :])

    def backward(g):
        gq = np.zeros_like(q.data)
        gkp = np.zeros_like(kp)
        for w in range(window):
            gw = g[..., w, None]
            gq += gw * kp[..., w:w + T, :]
            gkp[..., w:w + T, :] += gw * q.data
        return gq, gkp[..., r:r + T, :]

    return _result(out, (q, k), backward)


def local_aggregate(p: Tensor, v: Tensor, window: int) -> Tensor:
    """``o[..., t, :] = sum_w p[..., t, w] * v[..., t + w - window//2, :]``."""
    if p.shape != v.shape[:-1] + (window,):
        raise ValueError(f"shape mismatch: {p.shape} vs {v.shape} with window {window}")
    r = window // 2
    T = v.shape[-2]
    pad_spec = [(0, 0)] * (v.ndim - 2) + [(r, r), (0, 0)]
    vp = np.pad(v.data, pad_spec)
    out = np.zeros_like(v.data)
    for w in range(window):
        out += p.data[..., w, None] * vp[..., w:w + T, :]

    def backward(g):
        gp = np.empty_like(p.data)
        gvp = np.zeros_like(vp)
        for w in range(window):
            gp[..., w] = np.einsum("...td,...td->...t", g, vp[..., w:w + T, :])
            gvp[..., w:w + T, :] += p.data[..., w, None] * g
        return gp, gvp[..., r:r + T, :]

    return _result(out, (p, v), backward)


# ---------------------------------------------------------------- gradient checking


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-6,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between reverse-mode and central-difference gradients.

    ``f`` takes no arguments and returns a scalar tensor built from ``params``.
    With ``max_entries``, only that many randomly chosen entries per parameter
    are probed.
    """
    params = list(params)
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires 64-bit parameters")
        p.grad = None
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite function value")
    out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError("non-finite function value")
                numeric = (fp - fm) / (2 * h)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
