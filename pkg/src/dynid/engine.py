"""Small reverse-mode autodiff over numpy arrays, Adam, and checkpoints.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. Graphs are only
recorded when some input requires a gradient, so inference carries no
bookkeeping. There is no global state: independent graphs can coexist.

Sequence data uses a channels-last layout, ``(batch, time, channels)``,
so a kernel-1 convolution over a whole batch is a single matrix product.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .data import atomic_write_bytes
from .errors import FormatIOError, GraphError, ParseError, ShapeError, VersionError

BackwardFn = Callable[[np.ndarray], tuple]


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward: BackwardFn | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        for leaf, g in _run_backward(self):
            leaf.grad = g if leaf.grad is None else leaf.grad + g

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, idx: index(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(root: Tensor):
    if not root.requires_grad or (root._backward is None and not root._parents):
        raise GraphError("backward() needs a tensor produced by a recorded forward pass")
    if root.data.size != 1:
        raise GraphError(f"backward() needs a scalar, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            yield node, g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(loss: Tensor, wrt: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to named leaf tensors."""
    found = {id(t): g for t, g in _run_backward(loss)}
    return {name: found.get(id(t), np.zeros_like(t.data)) for name, t in wrt.items()}


# -- elementwise ---------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * mask,))


def cast(a, dtype) -> Tensor:
    a = as_tensor(a)
    src = a.dtype
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


# -- shape and reductions -------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def index(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Normalise along the last axis."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True)) + eps
    out = a.data / norm

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - out * dot) / norm,)

    return _make(out, (a,), backward)


# -- convolution ---------------------------------------------------------------


def conv1d_output_length(length: int, kernel_size: int, dilation: int) -> int:
    return length - (kernel_size - 1) * dilation


def conv1d(x, weight, bias=None, dilation: int = 1) -> Tensor:
    """Valid (unpadded) dilated 1-D convolution.

    ``x`` is (batch, L, C_in) or (L, C_in); ``weight`` is (C_out, C_in, k).
    ``out[b, t, o] = sum_{c, i} weight[o, c, i] * x[b, t + i * dilation, c] + bias[o]``
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d expects (B, L, C) input and (O, C, k) kernel, got {x.shape} and {weight.shape}")
    n_batch, length, c_in = xd.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {c_in}, kernel expects {w_in}")
    if dilation < 1:
        raise ShapeError("dilation must be a positive integer")
    l_out = conv1d_output_length(length, k, dilation)
    if l_out < 1:
        raise ShapeError(f"input length {length} too short for kernel {k} with dilation {dilation}")

    # im2col: the k shifted views side by side, one GEMM per direction
    if k == 1:
        cols = xd.reshape(n_batch * l_out, c_in)
    else:
        cols = np.concatenate([xd[:, i * dilation : i * dilation + l_out, :] for i in range(k)], axis=-1)
        cols = cols.reshape(n_batch * l_out, k * c_in)
    w = weight.data
    wm = np.ascontiguousarray(w.transpose(2, 1, 0).reshape(k * c_in, c_out))
    out = cols @ wm
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)
    out = out.reshape(n_batch, l_out, c_out)
    if squeeze:
        out = out[0]

    def backward(g):
        gr = g.reshape(n_batch * l_out, c_out)
        dw = (cols.T @ gr).reshape(k, c_in, c_out).transpose(2, 1, 0)
        dx = None
        if x.requires_grad:
            dcols = (gr @ wm.T).reshape(n_batch, l_out, k, c_in)
            if k == 1:
                dx = dcols.reshape(xd.shape)
            else:
                dx = np.zeros_like(xd)
                for i in range(k):
                    s = i * dilation
                    dx[:, s : s + l_out, :] += dcols[:, :, i, :]
            if squeeze:
                dx = dx[0]
        grads = [dx, np.ascontiguousarray(dw)]
        if bias is not None:
            grads.append(gr.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, backward)


# -- parameters and Adam ---------------------------------------------------------


@dataclass
class ParamStore:
    """Named parameters with Adam moments and the optimizer step count."""

    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p))
            self.v.setdefault(name, np.zeros_like(p))
            if self.m[name].shape != p.shape or self.v[name].shape != p.shape:
                raise ShapeError(f"Adam state for {name!r} does not match parameter shape {p.shape}")

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: p.copy() for k, p in self.params.items()},
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step,
        )

    def tensors(self) -> dict[str, Tensor]:
        """Fresh leaf tensors over the parameters, ready for a recorded forward pass."""
        return {k: Tensor(p, requires_grad=True) for k, p in self.params.items()}

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update; returns a new store."""
    t = store.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    params, m_new, v_new = {}, {}, {}
    for name, p in store.params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m = beta1 * store.m[name] + (1.0 - beta1) * g
        v = beta2 * store.v[name] + (1.0 - beta2) * (g * g)
        params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        m_new[name], v_new[name] = m, v
    return ParamStore(params, m_new, v_new, t)


# -- checkpoint container ---------------------------------------------------------

CHECKPOINT_MAGIC = b"CKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def save_checkpoint(path: str | os.PathLike, store: ParamStore, meta: dict | None = None) -> None:
    """Write parameters, Adam moments, step count and JSON metadata."""
    meta = dict(meta or {})
    meta["step"] = store.step
    meta_raw = json.dumps(meta, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_raw)), meta_raw]
    entries = []
    for prefix, table in (("param", store.params), ("adam_m", store.m), ("adam_v", store.v)):
        for name in sorted(table):
            entries.append((f"{prefix}:{name}", table[name]))
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        code = _DTYPE_CODES[arr.dtype]
        raw_name = name.encode()
        chunks.append(struct.pack("<I", len(raw_name)) + raw_name)
        chunks.append(struct.pack(f"<BI{arr.ndim}I", code, arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamStore, dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    try:
        return _parse_checkpoint(raw)
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint: {exc}") from exc


def _parse_checkpoint(raw: bytes) -> tuple[ParamStore, dict]:
    version, meta_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    pos = 12
    meta = json.loads(raw[pos : pos + meta_len])
    pos += meta_len
    (n_entries,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + name_len].decode()
        pos += name_len
        code, ndim = struct.unpack_from("<BI", raw, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += count * dt.itemsize
        prefix, _, pname = name.partition(":")
        tables[prefix][pname] = arr
    if pos != len(raw):
        raise ValueError(f"{len(raw) - pos} trailing bytes")
    store = ParamStore(tables["param"], tables["adam_m"], tables["adam_v"], int(meta.get("step", 0)))
    return store, meta
