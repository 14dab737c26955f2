"""Small reverse-mode autodiff over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`; with no
tape active they only compute values, which is the inference path.
Broadcasting is limited to what the expert needs: a trailing-dims operand
(biases, per-channel weights) against a batched one, and ``np.matmul``
batch broadcasting.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class NonFiniteError(ArithmeticError):
    pass


class ShapeError(ValueError):
    pass


class ChecksumError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of operations; ``backward`` replays it in reverse."""

    _local = threading.local()

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    @classmethod
    def active(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError("backward needs a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NonFiniteError(f"non-finite gradient flowing into {p.name or 'tensor'}")
                if p.grad is None:
                    p.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    p.grad += g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    tape = Tape.active()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append((out, tuple(parents), backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# -- primitives ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _result(out, (a, b), backward, "matmul")


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm: gain/bias must match the last dimension")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            d = x.shape[-1]
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return (gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape))

    return _result(out, (x, gamma, beta), backward, "layer_norm")


def embedding_lookup(table, idx: np.ndarray) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("embedding index out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), backward, "embedding_lookup")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _result(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(xs), backward, "concat")


def dropout(x, mask: np.ndarray | None) -> Tensor:
    """Multiply by a precomputed (already rescaled) mask; ``None`` is identity."""
    if mask is None:
        return as_tensor(x)
    return mul(x, Tensor(mask))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def take(x, key) -> Tensor:
    """Basic-slicing read ``x[key]``."""
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _result(x.data[key], (x,), backward, "take")


# -- parameters and optimisation ------------------------------------------------

class ParamStore:
    """Named parameters with AdamW moment estimates and a shared step count."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in self.params.items()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def n_values(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.arrays())
        out.m = {n: a.copy() for n, a in self.m.items()}
        out.v = {n: a.copy() for n, a in self.v.items()}
        out.step = self.step
        return out


@dataclass(frozen=True)
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    warmup_steps: int = 0
    total_steps: int = 0  # 0 disables the decay phase


def scheduled_lr(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= 0:
        return base_lr
    if step >= total_steps:
        return 0.0
    span = max(total_steps - warmup_steps, 1)
    return base_lr * (total_steps - step) / span


def adamw_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
               betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.0,
               eps: float = 1e-8) -> ParamStore:
    missing = set(store.params) - set(grads)
    if missing:
        raise KeyError(f"missing gradients for {sorted(missing)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    b1, b2 = betas
    store.step += 1
    t = store.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in store.params.items():
        g = grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


# -- dropout masks ------------------------------------------------------------------

_MASK64 = 0xFFFFFFFFFFFFFFFF
_philox_local = threading.local()


def _philox() -> np.random.Philox:
    if not hasattr(_philox_local, "bitgen"):
        _philox_local.bitgen = np.random.Philox(key=0)
    return _philox_local.bitgen


def dropout_mask(shape: Sequence[int], rate: float, seed: int, layer_id: int = 0, step: int = 0) -> np.ndarray:
    """Inverted-dropout mask from a Philox stream keyed by ``(seed, layer_id, step)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=np.float64)
    # same stream as Philox(key=seed | layer_id << 64 | step << 96); rekeying a cached
    # generator avoids the construction cost on every layer of every pass
    key = np.array([seed & _MASK64, (layer_id & 0xFFFFFFFF) | ((step & 0xFFFFFFFF) << 32)], dtype=np.uint64)
    bitgen = _philox()
    bitgen.state = {"bit_generator": "Philox",
                    "state": {"counter": np.zeros(4, dtype=np.uint64), "key": key},
                    "buffer": np.zeros(4, dtype=np.uint64), "buffer_pos": 4, "has_uint32": 0, "uinteger": 0}
    keep = np.random.Generator(bitgen).random(tuple(shape)) >= rate
    return keep / (1.0 - rate)


# -- checkpoint container -------------------------------------------------------------

CHECKPOINT_MAGIC = b"ERPCKPT\x00"
CHECKPOINT_VERSION = 1


def dumps_tensors(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None,
                  magic: bytes = CHECKPOINT_MAGIC, version: int = CHECKPOINT_VERSION) -> bytes:
    """Serialize named float64 arrays with a JSON header and trailing SHA-256."""
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", version))
    header = json.dumps(dict(meta or {}), sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # tobytes() is C-order; keeps 0-d shapes
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def loads_tensors(blob: bytes, magic: bytes = CHECKPOINT_MAGIC,
                  version: int = CHECKPOINT_VERSION) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < len(magic) + 32:
        raise ChecksumError("container truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("container checksum mismatch (file truncated or corrupted)")
    if body[:len(magic)] != magic:
        raise ValueError("bad magic bytes: not a checkpoint of the expected kind")
    pos = len(magic)
    (found,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if found != version:
        raise ValueError(f"unsupported container version {found} (expected {version})")
    (hlen,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    meta = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        size = int(math.prod(shape))
        arr = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape)
        tensors[name] = arr.astype(np.float64)
        pos += 8 * size
    if pos != len(body):
        raise ValueError("trailing bytes in container")
    return tensors, meta


def flat_params(store: ParamStore, names: Iterable[str] | None = None) -> np.ndarray:
    names = list(names) if names is not None else store.names()
    return np.concatenate([store[n].data.ravel() for n in names]) if names else np.zeros(0)
