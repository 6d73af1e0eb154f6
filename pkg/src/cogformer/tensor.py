"""Dense tensors with reverse-mode autodiff on a linear tape.

Training math runs in float32; gradient checking promotes to float64.
Every primitive validates output finiteness: a NaN/Inf anywhere is a hard
error, not a statistic. Reductions are sequential row-major so repeated
runs are bitwise identical.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

FP32 = np.float32
FP64 = np.float64


class ContractError(ValueError):
    """A caller violated an operation's contract."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


# ---------------------------------------------------------------------------
# tape

class Tape:
    """Ordered record of primitive ops; creation order is topological order."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []  # (out Tensor, input Tensors, backward fn)
        self.consumed = False


_ACTIVE_TAPE: Tape | None = None
_GRAD_ENABLED = True


def new_tape() -> Tape:
    """Start a fresh recording tape and make it active."""
    global _ACTIVE_TAPE
    _ACTIVE_TAPE = Tape()
    return _ACTIVE_TAPE


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values unchanged)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (FP32, FP64):
            arr = arr.astype(FP32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Barrier: shares values, carries no history, receives no gradient."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the recorded primitives
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _record(op: str, out_data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap a primitive result; enforce finiteness; tape it when grads flow."""
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite output from primitive '{op}'")
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape = _ACTIVE_TAPE
        if tape is None:
            raise ContractError(f"primitive '{op}' needs a live tape; call new_tape() first")
        if tape.consumed:
            raise ContractError(f"primitive '{op}' recorded on a consumed tape")
        tape.nodes.append((out, inputs, backward))
        out.tape = tape
    return out


def backward(loss: Tensor):
    """Populate .grad on every reachable requires_grad tensor.

    Visits each tape node exactly once, in reverse recording order. The tape
    is consumed afterwards: a second backward on it is a contract error.
    """
    if loss.size != 1:
        raise ContractError("backward expects a scalar loss")
    tape = loss.tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise ContractError("backward on a tensor with no recorded history")
    if tape.consumed:
        raise ContractError("backward called twice on a consumed tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, inputs, bfn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        grads = bfn(g)
        for t, gi in zip(inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if not np.all(np.isfinite(gi)):
                raise NumericError("non-finite gradient during backward")
            if t.grad is None:
                t.grad = gi.astype(t.data.dtype, copy=True)
            else:
                t.grad = t.grad + gi


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), bwd)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 1 or b.ndim < 2:
        raise ContractError("matmul expects at least (.., m, k) @ (.., k, n)")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _record("swapaxes", np.swapaxes(a.data, i, j), (a,),
                   lambda g: (np.swapaxes(g, i, j),))


def transpose2d(a) -> Tensor:
    """Transpose of a 2-D tensor (a view: shares storage with the input)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ContractError("transpose2d expects a 2-D tensor")
    return _record("transpose2d", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,),
                   lambda g: (g.reshape(old),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        slc = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slc[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slc)])
        return tuple(grads)

    return _record("concat", out, tuple(parts), bwd)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        return (ga,)

    return _record("getitem", out, (a,), bwd)


# ---------------------------------------------------------------------------
# nonlinearities

def clamp(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is identity strictly inside, else 0."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bwd(g):
        mask = (a.data > lo) & (a.data < hi)
        return (g * mask.astype(g.dtype),)

    return _record("clamp", out, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0).astype(g.dtype),)

    return _record("relu", out, (a,), bwd)


def _gelu_raw(x):
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu(a) -> Tensor:
    """tanh-approximation GELU (smooth everywhere, so finite differences behave)."""
    a = as_tensor(a)
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = (c * (x + 0.044715 * x ** 3)).astype(x.dtype)
    t = np.tanh(inner)
    out = (0.5 * x * (1.0 + t)).astype(x.dtype)

    def bwd(g):
        dinner = c * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d.astype(g.dtype),)

    return _record("gelu", out, (a,), bwd)


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid_raw(a.data)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record("sigmoid", y, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - y * y),)

    return _record("tanh", y, (a,), bwd)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    y = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def bwd(g):
        return (g * _sigmoid_raw(a.data),)

    return _record("softplus", y, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record("log", out, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def bwd(g):
        return (g * y,)

    return _record("exp", y, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)

    def bwd(g):
        return (g / (2.0 * y),)

    return _record("sqrt", y, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax", y, (a,), bwd)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift by gamma/beta."""
    x = as_tensor(x)
    gamma = as_tensor(gamma, like=x)
    beta = as_tensor(beta, like=x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = (xhat * gamma.data + beta.data).astype(x.data.dtype)

    def bwd(g):
        d = x.shape[-1]
        dxhat = g * gamma.data
        gx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gamma.shape)
        gbeta = _unbroadcast(g, beta.shape)
        return gx.astype(g.dtype), ggamma, gbeta

    return _record("layernorm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record("sum", np.asarray(out), (a,), bwd)


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.shape).copy(),)

    return _record("mean", np.asarray(out), (a,), bwd)


# ---------------------------------------------------------------------------
# gather / scatter

def embedding_gather(table, ids) -> Tensor:
    """Row-gather: table [V, d] indexed by integer ids of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding_gather: id out of range")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _record("embedding_gather", out, (table,), bwd)


def scatter_row_sum(values, index, n_rows: int) -> Tensor:
    """Sum rows of values [E, d] into buckets given by index [E] -> [n_rows, d]."""
    values = as_tensor(values)
    index = np.asarray(index)
    out = np.zeros((n_rows, values.shape[-1]), dtype=values.data.dtype)
    np.add.at(out, index, values.data)

    def bwd(g):
        return (g[index],)

    return _record("scatter_row_sum", out, (values,), bwd)


def cross_entropy(logits, targets) -> Tensor:
    """Mean token negative log-likelihood; logits [..., V], integer targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets)
    x = logits.data.reshape(-1, logits.shape[-1])
    tt = t.reshape(-1)
    if tt.min() < 0 or tt.max() >= x.shape[1]:
        raise ContractError("cross_entropy: target id out of range")
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - x[np.arange(x.shape[0]), tt]
    out = np.asarray(nll.mean(), dtype=x.dtype)

    def bwd(g):
        p = np.exp(x - lse)
        p[np.arange(x.shape[0]), tt] -= 1.0
        gx = (g * p / x.shape[0]).astype(x.dtype)
        return (gx.reshape(logits.shape),)

    return _record("cross_entropy", out, (logits,), bwd)


def linear(x, w, b=None) -> Tensor:
    """x @ w (+ b). The universal affine building block."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


# ---------------------------------------------------------------------------
# deterministic RNG

_MASK64 = (1 << 64) - 1


def derive_seed(seed: int, *labels: str) -> int:
    """Stable 64-bit child seed from a parent seed and a label path."""
    h = hashlib.sha256(("%d|" % seed + "|".join(labels)).encode()).digest()
    return int.from_bytes(h[:8], "little") & _MASK64


class RngStream:
    """Counter-based generator: same (seed, counter) gives the same draw
    on every platform and every run, independent of call history elsewhere."""

    __slots__ = ("seed", "counter")

    ALGORITHM = "philox4x64"

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def child(self, *labels: str) -> "RngStream":
        return RngStream(derive_seed(self.seed, *labels))

    def _generator(self) -> np.random.Generator:
        bg = np.random.Philox(key=self.seed, counter=[self.counter, 0, 0, 0])
        self.counter += 1
        return np.random.Generator(bg)

    def normal(self, shape, scale: float = 1.0, dtype=FP32) -> np.ndarray:
        return (self._generator().standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0, dtype=FP32) -> np.ndarray:
        return self._generator().uniform(lo, hi, shape).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def integers(self, lo: int, hi: int, shape=None) -> np.ndarray:
        return self._generator().integers(lo, hi, size=shape)

    def state(self) -> dict:
        return {"seed": self.seed, "counter": self.counter, "algorithm": self.ALGORITHM}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        if state.get("algorithm", cls.ALGORITHM) != cls.ALGORITHM:
            raise ContractError("rng stream algorithm mismatch")
        return cls(state["seed"], state["counter"])


@dataclass(frozen=True)
class InitSpec:
    """Declarative tensor initializer: zeros, a constant, or scaled normal."""

    kind: str  # zeros | constant | normal
    shape: tuple
    value: float = 0.0
    scale: float = 1.0


def rng_init(stream: RngStream, spec: InitSpec, requires_grad: bool = True,
             dtype=FP32) -> Tensor:
    if spec.kind == "zeros":
        data = np.zeros(spec.shape, dtype=dtype)
    elif spec.kind == "constant":
        data = np.full(spec.shape, spec.value, dtype=dtype)
    elif spec.kind == "normal":
        data = stream.normal(spec.shape, scale=spec.scale, dtype=dtype)
    else:
        raise ContractError(f"unknown init kind '{spec.kind}'")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, points, eps: float = 1e-6, coord_samples: int | None = None,
               rng: RngStream | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    `f` rebuilds its graph from `points` (float64 leaves) on every call.
    When coord_samples is given, that many coordinates per tensor are
    checked (deterministically, via `rng`); otherwise all coordinates.
    Relative error is |analytic - numeric| / max(1, |numeric|).
    """
    points = [p if isinstance(p, Tensor) else Tensor(p, requires_grad=True, dtype=FP64)
              for p in points]
    for p in points:
        p.zero_grad()
    new_tape()
    loss = f(*points)
    backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in points]

    max_rel = 0.0
    for p, g in zip(points, analytic):
        flat = p.data.reshape(-1)
        if coord_samples is None or coord_samples >= flat.size:
            coords = range(flat.size)
        else:
            r = rng or RngStream(0)
            coords = sorted(set(int(i) for i in r.integers(0, flat.size, coord_samples)))
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                lp = float(f(*points).data)
                flat[i] = orig - eps
                lm = float(f(*points).data)
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            if not math.isfinite(num):
                raise NumericError("non-finite numeric gradient in grad_check")
            ana = 0.0 if g is None else float(g.reshape(-1)[i])
            rel = abs(ana - num) / max(1.0, abs(num))
            max_rel = max(max_rel, rel)
    return max_rel
