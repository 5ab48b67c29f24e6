"""Dense float64 tensors with reverse-mode differentiation.

Small define-by-run engine: every operation on tensors that require
gradients records a closure on a tape; ``Tensor.backward`` walks the
graph in reverse topological order. Everything is 64-bit so gradient
checks against central finite differences are meaningful.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GradientError",
    "affine",
    "relu",
    "softmax",
    "softmax_lastdim",
    "gather_rows",
    "concat",
    "no_grad",
    "Adam",
    "LrSchedule",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class GradientError(RuntimeError):
    """Contract violation in the autodiff machinery (missing grad, non-scalar loss)."""


_grad_enabled = True


class no_grad:
    """Context manager disabling tape recording (evaluation forward passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-d float64 array participating in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = cls(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    # bookkeeping ----------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def assert_finite(self, what: str = "tensor"):
        if not self.is_finite():
            raise GradientError(f"non-finite values in {what}")

    def _accumulate(self, grad: np.ndarray, owned: bool = False):
        """Add ``grad`` into the buffer. ``owned=True`` promises the caller
        built ``grad`` fresh (no views, no aliases), letting the first
        accumulation adopt the array instead of copying."""
        if self.grad is None:
            self.grad = grad if owned else np.array(grad)
        else:
            self.grad += grad

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Populate ``grad`` on every reachable requires-grad tensor.

        The loss must be a scalar. Repeated calls without zeroing grads
        accumulate, matching the usual convention.
        """
        if self.data.size != 1:
            raise GradientError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # elementwise arithmetic -------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward_fn(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                a._accumulate(ga, owned=ga is not g)
            if b.requires_grad:
                gb = _unbroadcast(g, b.data.shape)
                b._accumulate(gb, owned=gb is not g)

        return Tensor._from_op(a.data + b.data, (a, b), backward_fn)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward_fn(g):
            if a.requires_grad:
                ga = _unbroadcast(g, a.data.shape)
                a._accumulate(ga, owned=ga is not g)
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g, b.data.shape), owned=True)

        return Tensor._from_op(a.data - b.data, (a, b), backward_fn)

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.data.shape), owned=True)
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.data.shape), owned=True)

        return Tensor._from_op(a.data * b.data, (a, b), backward_fn)

    __rmul__ = __mul__

    def __neg__(self):
        a = self

        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(-g, owned=True)

        return Tensor._from_op(-a.data, (a,), backward_fn)

    def __matmul__(self, other):
        """Matrix product; the left operand may carry extra leading batch
        dimensions, the right must be 2-d."""
        other = self._coerce(other)
        a, b = self, other
        if a.data.ndim < 2 or b.data.ndim != 2:
            raise GradientError(f"matmul expects (..., m, k) @ (k, n), got {a.shape} @ {b.shape}")
        if a.data.shape[-1] != b.data.shape[0]:
            raise GradientError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
        din, dout = b.data.shape
        lead = a.data.shape[:-1]
        a2 = np.ascontiguousarray(a.data).reshape(-1, din)  # one big GEMM

        def backward_fn(g):
            g2 = np.ascontiguousarray(g).reshape(-1, dout)
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(*lead, din), owned=True)
            if b.requires_grad:
                b._accumulate(a2.T @ g2, owned=True)

        return Tensor._from_op((a2 @ b.data).reshape(*lead, dout), (a, b), backward_fn)

    # reductions and shaping -------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        in_shape = a.data.shape

        def backward_fn(g):
            if not a.requires_grad:
                return
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, in_shape).copy(), owned=True)

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward_fn)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        in_shape = a.data.shape

        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g.reshape(in_shape))

        return Tensor._from_op(a.data.reshape(shape), (a,), backward_fn)

    def abs(self):
        a = self

        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g * np.sign(a.data), owned=True)

        return Tensor._from_op(np.abs(a.data), (a,), backward_fn)

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g * out_data, owned=True)

        return Tensor._from_op(out_data, (a,), backward_fn)

    def log(self):
        a = self

        def backward_fn(g):
            if a.requires_grad:
                a._accumulate(g / a.data, owned=True)

        return Tensor._from_op(np.log(a.data), (a,), backward_fn)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Parameter(Tensor):
    """Named learnable tensor; always requires grad."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# functional ops ---------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    a = x
    mask = a.data > 0

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * mask, owned=True)

    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), backward_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    a = x
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot), owned=True)

    return Tensor._from_op(out_data, (a,), backward_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def affine(x: Tensor, weight: Tensor, bias: Tensor, fuse_relu: bool = False) -> Tensor:
    """Affine map over the last axis: out[..., j] = sum_i x[..., i] w[i, j] + b[j].

    One tape node covering the product, the bias, and (optionally) a ReLU.
    """
    if x.data.ndim < 2:
        raise GradientError(f"affine expects at least a 2-d input, got {x.shape}")
    if x.data.shape[-1] != weight.data.shape[0] or weight.data.shape[1] != bias.data.shape[0]:
        raise GradientError(
            f"affine shape mismatch: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    a, w, b = x, weight, bias
    din, dout = w.data.shape
    lead = a.data.shape[:-1]
    a2 = np.ascontiguousarray(a.data).reshape(-1, din)
    out = a2 @ w.data
    out += b.data
    mask = None
    if fuse_relu:
        mask = out > 0
        out = np.where(mask, out, 0.0)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g).reshape(-1, dout)
        if mask is not None:
            g2 = g2 * mask
        if a.requires_grad:
            a._accumulate((g2 @ w.data.T).reshape(*lead, din), owned=True)
        if w.requires_grad:
            w._accumulate(a2.T @ g2, owned=True)
        if b.requires_grad:
            b._accumulate(g2.sum(axis=0), owned=True)

    return Tensor._from_op(out.reshape(*lead, dout), (a, w, b), backward_fn)


def attention_pool(scores: Tensor, values: Tensor, axis: int = 1) -> Tensor:
    """softmax(scores) blended sum of values along ``axis``, in one node.

    out = sum_k softmax_k(scores) * values; the softmax normalizes over the
    same axis that is summed out.
    """
    s, v = scores, values
    if s.data.shape != v.data.shape:
        raise GradientError(f"scores {s.shape} and values {v.shape} must match")
    shifted = s.data - s.data.max(axis=axis, keepdims=True)
    w = np.exp(shifted)
    w /= w.sum(axis=axis, keepdims=True)
    out = (w * v.data).sum(axis=axis)

    def backward_fn(g):
        gx = np.expand_dims(g, axis)
        if v.requires_grad:
            v._accumulate(gx * w, owned=True)
        if s.requires_grad:
            # ds = w * g * (v - out); the usual softmax correction term
            # vanishes because out is the w-blend of v itself
            s._accumulate(w * (gx * (v.data - np.expand_dims(out, axis))), owned=True)

    return Tensor._from_op(out, (s, v), backward_fn)


def gather_rows(source: Tensor, indices, shape: tuple | None = None) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds (repeats accumulate).

    ``shape`` optionally reshapes the gathered block in the same tape node.
    """
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if source.data.ndim != 2:
        raise GradientError(f"gather_rows expects a 2-d source, got {source.shape}")
    n, d = source.data.shape
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"gather index out of range for {n} rows")
    a = source

    def backward_fn(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        g2 = g.reshape(-1, d)
        if idx.size > 64:
            # sorted segment sum beats np.add.at by a wide margin
            perm = np.argsort(idx, kind="stable")
            rows, starts = np.unique(idx[perm], return_index=True)
            a.grad[rows] += np.add.reduceat(g2[perm], starts, axis=0)
        else:
            np.add.at(a.grad, idx, g2)

    out_data = a.data[idx]
    if shape is not None:
        out_data = out_data.reshape(shape)
    return Tensor._from_op(out_data, (a,), backward_fn)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(tensors)
    sizes = [t.data.shape[axis] for t in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(parts, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._from_op(np.concatenate([t.data for t in parts], axis=axis), parts, backward_fn)


# optimizer -------------------------------------------------------------------


class Adam:
    """Adam with classical (coupled) weight decay added to the gradient.

    Defaults betas=(0.9, 0.999), eps=1e-8.
    """

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params: list[Tensor] = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                name = getattr(p, "name", "<unnamed>")
                raise GradientError(f"parameter {name} has no gradient; call backward first")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: rate(e) = initial * ratio ** (e // period)."""

    initial: float
    ratio: float = 0.5
    period: int = 20

    def rate(self, epoch: int) -> float:
        if self.period <= 0:
            raise ValueError("decay period must be positive")
        return self.initial * self.ratio ** (epoch // self.period)


# gradient checking -----------------------------------------------------------


def grad_check(fn, tensors, tol: float = 1e-5, step: float = 1e-5,
               max_checks: int | None = None, seed: int = 0,
               return_error: bool = False):
    """Compare analytic gradients of ``fn()`` against central finite differences.

    ``fn`` must be a deterministic closure returning a scalar Tensor computed
    from the current ``.data`` of ``tensors``. When ``max_checks`` is given,
    only that many coordinates per tensor are probed (seeded choice), which
    keeps large layers affordable.
    """
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    analytic = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    rng = np.random.default_rng(seed)

    worst = 0.0
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_checks is not None and n > max_checks:
            coords = rng.choice(n, size=max_checks, replace=False)
        a_flat = a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            denom = max(abs(numeric), abs(a_flat[i]), 1e-6)
            worst = max(worst, abs(numeric - a_flat[i]) / denom)
    for t in tensors:
        t.zero_grad()
    if return_error:
        return bool(worst < tol), worst
    return bool(worst < tol)


# checkpoint file format --------------------------------------------------------
#
# Layout (all little-endian):
#   magic  b"RDCP"            4 bytes
#   version                   1 byte (currently 1)
#   meta length               u32, then UTF-8 JSON blob
#   entry count               u32
#   per entry: u16 name length, name bytes, u8 ndim, ndim * u32 dims,
#              row-major float64 payload

_MAGIC = b"RDCP"
_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", _VERSION))
        fh.write(struct.pack("<I", len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes())


def _read_exact(fh: io.BufferedReader, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint file")
    return buf


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise CheckpointError("bad magic; not a checkpoint file")
        version = struct.unpack("<B", _read_exact(fh, 1))[0]
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        meta_len = struct.unpack("<I", _read_exact(fh, 4))[0]
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        count = struct.unpack("<I", _read_exact(fh, 4))[0]
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read_exact(fh, 2))[0]
            name = _read_exact(fh, name_len).decode("utf-8")
            ndim = struct.unpack("<B", _read_exact(fh, 1))[0]
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            n_vals = int(np.prod(shape)) if shape else 1
            payload = _read_exact(fh, 8 * n_vals)
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return meta, arrays
