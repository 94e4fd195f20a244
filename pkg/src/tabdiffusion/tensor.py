"""Dense float64 tensors with a small reverse-mode gradient tape.

Only the operations needed by the denoisers and the guidance classifiers are
provided. Operations are recorded when a :class:`Tape` is active and at least
one input requires a gradient; outside a tape everything is evaluated eagerly
with no bookkeeping, which is what the samplers use.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Iterator

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records differentiable operations in execution order.

    Because nodes are appended as they are created, the recorded list is
    already topologically sorted and backward simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.grads: dict[str, np.ndarray] = {}

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, node: Tensor):
        self.nodes.append(node)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
        """Propagate d(loss) back through the tape.

        Returns a mapping from leaf name to gradient. Leaves listed in `wrt`
        that the loss does not depend on get zero gradients.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._backward is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out: dict[str, np.ndarray] = {}
        for key, leaf in leaves.items():
            out[leaf.name or f"leaf{key}"] = grads[key]
        if loss._backward is None and loss.requires_grad:
            out[loss.name or f"leaf{id(loss)}"] = np.ones_like(loss.data)
        for p in wrt or ():
            out.setdefault(p.name, np.zeros_like(p.data))
        self.grads = out
        return out


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    return tape.backward(loss, wrt)


def _tracing(*inputs: Tensor) -> Tape | None:
    if not _ACTIVE:
        return None
    if any(t.requires_grad for t in inputs):
        return _ACTIVE[-1]
    return None


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _tracing(*parents)
    out = Tensor(data)
    if tape is not None:
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def silu(a: Tensor) -> Tensor:
    sig = expit(a.data)
    return _make(a.data * sig, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


# reductions and shape ops


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _make(np.asarray(a.data.sum(axis=axis)), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def pad_last(a: Tensor, right: int) -> Tensor:
    """Zero-pad the last axis on the right."""
    if right == 0:
        return a
    width = [(0, 0)] * (a.ndim - 1) + [(0, right)]
    n = a.shape[-1]
    return _make(np.pad(a.data, width), (a,), lambda g: (g[..., :n],))


def crop_last(a: Tensor, length: int) -> Tensor:
    if length == a.shape[-1]:
        return a
    full = a.shape[-1]

    def bw(g):
        out = np.zeros(g.shape[:-1] + (full,))
        out[..., :length] = g
        return (out,)
    return _make(a.data[..., :length].copy(), (a,), bw)


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Repeat every position along the last axis `factor` times."""
    def bw(g):
        return (g.reshape(g.shape[:-1] + (a.shape[-1], factor)).sum(axis=-1),)
    return _make(np.repeat(a.data, factor, axis=-1), (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - logz
    soft = np.exp(y)
    return _make(y, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis of a (batch, channels, length) input.

    `kernel` has shape (out_channels, in_channels, width).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d input and kernel, got {x.shape}, {kernel.shape}")
    batch, cin, length = x.shape
    cout, kcin, width = kernel.shape
    if kcin != cin:
        raise DimensionError(f"kernel expects {kcin} input channels, input has {cin}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"invalid stride={stride} / padding={padding}")
    padded_len = length + 2 * padding
    if padded_len < width:
        raise DimensionError(f"padded length {padded_len} shorter than kernel width {width}")
    out_len = (padded_len - width) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=2)[:, :, ::stride, :]
    # (batch, out_len, cin*width) @ (cin*width, cout)
    cols = windows.transpose(0, 2, 1, 3).reshape(batch, out_len, cin * width)
    wmat = kernel.data.reshape(cout, cin * width).T
    out = (cols @ wmat).transpose(0, 2, 1)

    def bw(g):
        gt = g.transpose(0, 2, 1)  # (batch, out_len, cout)
        gk = np.einsum("blc,blo->oc", cols, gt).reshape(kernel.shape)
        gcols = (gt @ wmat.T).reshape(batch, out_len, cin, width)
        gxp = np.zeros_like(xp)
        span = stride * (out_len - 1) + 1
        for j in range(width):
            gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        return gx, gk

    return _make(np.ascontiguousarray(out), (x, kernel), bw)


class ParamSet:
    """Ordered, name-unique collection of trainable tensors."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def assign(self, name: str, value: np.ndarray):
        """Overwrite a parameter's values in place; the shape is fixed."""
        t = self._params[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.shape:
            raise DimensionError(f"{name}: shape {value.shape} != {t.shape}")
        t.data = value.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        if missing:
            raise ContractError(f"missing parameters: {sorted(missing)}")
        for k in self._params:
            self.assign(k, state[k])

    def count(self) -> int:
        return int(np.sum([v.data.size for v in self._params.values()]))
