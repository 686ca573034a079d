"""Dense NCHW tensors with reverse-mode differentiation.

Every value flowing through the network is a float64 :class:`Tensor`.  Ops
record their parents and a closure mapping the output gradient to one
gradient per parent; :func:`backward` walks the recorded graph in reverse
execution order.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import OrderedDict
from functools import lru_cache
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_mac_counter = contextvars.ContextVar("mac_counter", default=None)


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def count_macs_scope():
    """Collect conv multiply-accumulates issued inside the block."""
    counter = [0]
    token = _mac_counter.set(counter)
    try:
        yield counter
    finally:
        _mac_counter.reset(token)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic with numpy broadcasting; gradients are summed back over broadcast axes
    def __add__(self, other):
        return _binary(self, other, np.add, lambda g, a, b: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return _binary(self, other, np.subtract, lambda g, a, b: (g, -g))

    def __rsub__(self, other):
        return _binary(_as_tensor(other), self, np.subtract, lambda g, a, b: (g, -g))

    def __mul__(self, other):
        return _binary(self, other, np.multiply, lambda g, a, b: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary(self, other, np.divide, lambda g, a, b: (g / b, -g * a / (b * b)))

    def __rtruediv__(self, other):
        return _binary(_as_tensor(other), self, np.divide, lambda g, a, b: (g / b, -g * a / (b * b)))

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,))

    def sum(self, axes: Sequence[int] | None = None) -> "Tensor":
        """Sum with kept dimensions; ``axes=None`` reduces to shape (1,1,1,1)."""
        if axes is None:
            total = self.data.sum()
            out = np.full((1,) * max(self.data.ndim, 4), total)
            shape = self.data.shape
            return _node(out, (self,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
        axes = tuple(axes)
        shape = self.data.shape
        return _node(self.data.sum(axis=axes, keepdims=True), (self,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, axes: Sequence[int] | None = None) -> "Tensor":
        if axes is None:
            count = self.data.size
        else:
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axes) * (1.0 / count)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    needs = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = grad_fn
    return out


def _binary(a, b, fn, grad_fn) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def back(g):
        ga, gb = grad_fn(g, a.data, b.data)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _node(data, (a, b), back)


class GradTape:
    """Graph nodes reachable from an output, in execution (topological) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, output: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` (or let the
    optimizer do it) between steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor requiring grad")
    tape = tape or GradTape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ----------------------------------------------------------------------------- ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an NCHW input with an (c_out, c_in, k, k) kernel."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    if c != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {c_in}")
    if stride not in (1, 2) or padding < 0:
        raise ShapeError(f"unsupported stride={stride} / padding={padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo}")

    counter = _mac_counter.get()
    if counter is not None:
        counter[0] += k * k * c_in * c_out * ho * wo * n

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    sn, sc, sh, sw = xp.strides
    cols = as_strided(xp, (n, ho, wo, c, k, k), (sn, sh * stride, sw * stride, sc, sh, sw))
    cols = cols.reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _node(out, parents, back)


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights, half-pixel centers.

    Source coordinate of output pixel ``d`` is ``(d + 0.5) * n_in / n_out - 0.5``
    clamped below at 0; the upper neighbour is clamped to ``n_in - 1``.
    """
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for d in range(n_out):
        src = max((d + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    m.setflags(write=False)
    return m


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return a.copy()
    return interp_matrix(h, out_h) @ a @ interp_matrix(w, out_w).T


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _node(x.data.copy(), (x,), lambda g: (g,))
    rh, rw = interp_matrix(h, out_h), interp_matrix(w, out_w)
    return _node(rh @ x.data @ rw.T, (x,), lambda g: (rh.T @ g @ rw,))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    n, _, h, w = xs[0].shape
    for t in xs:
        if t.data.ndim != 4 or (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat mismatch: {t.shape} vs batch/spatial {(n, h, w)}")
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])
    data = np.concatenate([t.data for t in xs], axis=1)
    return _node(data, tuple(xs),
                 lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _node(x.data[:, start:stop].copy(), (x,), back)


def eltwise(x: Tensor, y: Tensor, op: str) -> Tensor:
    """``x * y`` or ``x + y`` where y equals x in shape or is a (n,c,1,1) / (n,1,h,w) gate."""
    n, c, h, w = x.shape
    if y.shape not in ((n, c, h, w), (n, c, 1, 1), (n, 1, h, w)):
        raise ShapeError(f"{y.shape} does not broadcast against {x.shape}")
    if op == "mul":
        return x * y
    if op == "add":
        return x + y
    raise ValueError(f"unknown eltwise op {op!r}")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _node(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axes=(2, 3))


def channel_stats(x: Tensor) -> Tensor:
    """Per-pixel mean and max over channels, stacked as two channels."""
    d = x.data
    c = d.shape[1]
    arg = np.argmax(d, axis=1)[:, None]  # first index wins on ties
    mx = np.take_along_axis(d, arg, axis=1)
    out = np.concatenate([d.mean(axis=1, keepdims=True), mx], axis=1)

    def back(g):
        gx = np.broadcast_to(g[:, :1] / c, d.shape).copy()
        np.put_along_axis(gx, arg, np.take_along_axis(gx, arg, axis=1) + g[:, 1:], axis=1)
        return (gx,)

    return _node(out, (x,), back)


# ----------------------------------------------------------------------------- parameters


class ParamSet:
    """Ordered, uniquely named parameter tensors."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._items: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not t.requires_grad:
            raise ValueError(f"parameter {name!r} must require grad")
        self._items[name] = t

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items.items())

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def names(self) -> list[str]:
        return list(self._items)

    def numel(self) -> int:
        return sum(t.size for t in self._items.values())

    def zero_grad(self) -> None:
        for t in self._items.values():
            t.zero_grad()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    ``f`` must return a scalar tensor and may close over other tensors; ``x`` is
    perturbed in place and restored.  ``coords`` restricts the comparison to a
    subset of flat indices.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    x.requires_grad = was
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(analytic[i] - num) / max(1e-8, abs(analytic[i]) + abs(num))
            worst = max(worst, err)
    return worst
