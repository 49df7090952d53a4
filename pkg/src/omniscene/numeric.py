"""Dense float64 tensors with reverse-mode gradients.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward closure; :func:`backward` replays that record in
reverse topological order. Leaves receive ``.grad``; intermediates do not.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation

SIGMOID_CLAMP = 40.0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _not_scalar():
    raise ContractViolation("item() requires a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise ContractViolation(f"{op} produced a non-finite value")
    return out


# elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _finite(a.data / b.data, "div")
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _finite(a.data ** exponent, "power")
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = _finite(np.exp(a.data), "exp")
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _finite(np.log(a.data), "log")
    return _result(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = _finite(np.sqrt(a.data), "sqrt")
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def tabs(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def identity(a: Tensor) -> Tensor:
    return as_tensor(a)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    z = np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = 1.0 / (1.0 + np.exp(-z))
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data > floor
    return _result(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax. ``mask`` (broadcastable bool) marks slots that
    take part; excluded slots get weight exactly zero."""
    a = as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ContractViolation(f"softmax axis {axis} out of range for rank {a.ndim}")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ContractViolation("softmax mask excludes every slot along the axis")
        x = np.where(mask, x, -np.inf)
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (a,), backward)


# reductions and shape ---------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward)


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in items], axis=axis), items, backward)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _result(np.stack([t.data for t in items], axis=axis), items, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ContractViolation("matmul needs operands of rank >= 1")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise ContractViolation(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, -1)), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (-1, 1)))
        return reshape(out, out.shape[:-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward)


# gradient machinery -------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked leaf reachable from ``loss``.

    Calling twice on the same graph, or into leaves whose gradient buffers
    were not reset, raises :class:`ContractViolation`.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not depend on any tracked tensor")
    if loss._consumed:
        raise ContractViolation("backward already ran on this graph")
    order = _topological(loss)
    leaves = [n for n in order if n._backward is None]
    if any(leaf.grad is not None for leaf in leaves):
        raise ContractViolation("leaf gradients not reset; call zero_grad first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    loss._consumed = True


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_difference_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-4,
                           indices: Sequence[tuple[int, ...]] | None = None) -> Tensor:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h``.

    ``indices`` restricts evaluation to the listed coordinates; the rest of the
    returned tensor is left at zero.
    """
    if h <= 0:
        raise ContractViolation("finite difference step must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    out = np.zeros_like(base)
    coords = indices if indices is not None else list(np.ndindex(base.shape))
    for idx in coords:
        plus = base.copy()
        plus[idx] += h
        minus = base.copy()
        minus[idx] -= h
        out[idx] = (_scalar(f(Tensor(plus))) - _scalar(f(Tensor(minus)))) / (2.0 * h)
    return Tensor(out)


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


# networks --------------------------------------------------------------------------

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": identity,
}


@dataclass
class Mlp:
    """Affine layers with a named activation between them; the last layer is
    affine only. Weights are stored ``(in, out)`` so ``x @ W + b`` applies."""

    widths: list[int]
    weights: list[Tensor]
    biases: list[Tensor]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ContractViolation(f"invalid layer widths {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ContractViolation(f"layer {i} shapes {w.shape}/{b.shape} do not match widths")

    @classmethod
    def init(cls, widths: Sequence[int], rng: np.random.Generator, activation: str = "relu",
             gain: float = 1.0, last_gain: float | None = None) -> "Mlp":
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            g = gain if (last_gain is None or i < len(widths) - 2) else last_gain
            scale = g * np.sqrt(2.0 / n_in) if activation == "relu" else g / np.sqrt(n_in)
            weights.append(Tensor(rng.normal(0.0, scale, (n_in, n_out)), requires_grad=True))
            biases.append(Tensor(np.zeros(n_out), requires_grad=True))
        return cls(list(widths), weights, biases, activation)

    @classmethod
    def zeros(cls, widths: Sequence[int], activation: str = "relu") -> "Mlp":
        weights = [Tensor(np.zeros((a, b)), requires_grad=True) for a, b in zip(widths[:-1], widths[1:])]
        biases = [Tensor(np.zeros(b), requires_grad=True) for b in widths[1:]]
        return cls(list(widths), weights, biases, activation)

    def parameters(self) -> list[Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


def mlp_forward(net: Mlp, x) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != net.widths[0]:
        raise ContractViolation(f"input width {x.shape[-1]} != first layer width {net.widths[0]}")
    act = ACTIVATIONS[net.activation]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        x = x @ w + b
        if i < last:
            x = act(x)
    return x


# parameter containers -------------------------------------------------------------

def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Walk dataclasses, lists and dicts collecting gradient-tracked tensors."""
    found: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            found[prefix] = obj
    elif is_dataclass(obj) and not isinstance(obj, type):
        for f in fields(obj):
            found.update(named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            found.update(named_parameters(item, f"{prefix}.{i}"))
    elif isinstance(obj, dict):
        for k, item in obj.items():
            found.update(named_parameters(item, f"{prefix}.{k}" if prefix else str(k)))
    return found


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0  # decoupled, applied as lr * wd * p
    step_count: int = 0
    _m: list[np.ndarray] = field(default_factory=list)
    _v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grad(self.params)


# serialization -----------------------------------------------------------------------

MAGIC = b"OMSK1"
FORMAT_VERSION = 1


def dump_params(params: dict[str, Tensor | np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, value in params.items():
        arr = np.asarray(as_tensor(value).data, dtype="<f8", order="C")  # keeps rank 0
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def parse_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:5] != MAGIC:
        raise ContractViolation("not an OMSK1 parameter container")
    (version,) = struct.unpack_from("<I", blob, 5)
    if version != FORMAT_VERSION:
        raise ContractViolation(f"unsupported container version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * count
    return out


def save_params(path, params: dict[str, Tensor | np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_params(params))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_params(fh.read())


def assign_params(target: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    missing = set(target) - set(values)
    if missing:
        raise ContractViolation(f"parameter file lacks {sorted(missing)}")
    for name, tensor in target.items():
        if values[name].shape != tensor.shape:
            raise ContractViolation(f"shape mismatch for {name}: {values[name].shape} vs {tensor.shape}")
        tensor.data = np.array(values[name], dtype=np.float64)
