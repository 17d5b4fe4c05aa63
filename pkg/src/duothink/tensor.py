"""Dense-tensor compute substrate with tape-based reverse-mode differentiation.

Small by design: just the ops a causal decoder transformer needs, on numpy
arrays, in float32 (training/inference) or float64 (gradient checking).
Every op records its parents and a backward closure; ``backward`` walks the
tape once and accumulates gradients into ``.grad``.
"""

from __future__ import annotations

import numpy as np

F32 = np.float32
F64 = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class StaleGraphError(RuntimeError):
    """Raised when backward() is called twice on the same recorded graph."""


class EmptyLossError(ValueError):
    """Raised when a loss is requested over an all-masked batch."""


def _as_array(data, dtype):
    arr = np.asarray(data, dtype=dtype)
    return arr


class Tensor:
    """A numpy array plus optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_spent")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _grad_fn=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        self.data = _as_array(data, dtype or (data.dtype if isinstance(data, np.ndarray) else F32))
        if self.data.dtype not in (F32, F64):
            self.data = self.data.astype(F32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._grad_fn = _grad_fn
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"

    def item(self):
        return float(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None


def _dtype_of(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise ShapeError(f"mixed dtypes in op: {dt} vs {t.dtype}")
    return dt


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _make(data, parents, grad_fn):
    if any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, _parents=tuple(parents), _grad_fn=grad_fn)
    else:
        out = Tensor(data)
    return out


# --- elementwise / structural ops ---------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; the only broadcast allowed is a trailing bias vector."""
    _dtype_of(a, b)
    if a.shape != b.shape:
        if b.data.ndim == 1 and a.shape[-1:] == b.shape:
            pass  # bias add over last axis
        else:
            raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def grad_fn(g):
        ga = g
        if b.shape != a.shape:
            gb = g.reshape(-1, b.shape[0]).sum(axis=0)
        else:
            gb = g
        return ga, gb

    return _make(out_data, (a, b), grad_fn)


def add_rows(x: Tensor, p: Tensor) -> Tensor:
    """Add a row table p[N, d] onto x[N, d] or x[B, N, d] (position add)."""
    _dtype_of(x, p)
    if x.shape[-2:] != p.shape:
        raise ShapeError(f"add_rows shapes {x.shape} vs {p.shape}")
    out = x.data + p.data if x.data.ndim == 2 else x.data + p.data[None]

    def grad_fn(g):
        gp = g if x.data.ndim == 2 else g.sum(axis=0)
        return g, gp

    return _make(out, (x, p), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _dtype_of(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
    out = a.data * b.data

    def grad_fn(g):
        return g * b.data, g * a.data

    return _make(out, (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.dtype.type(s)
    out = a.data * s

    def grad_fn(g):
        return (g * s,)

    return _make(out, (a,), grad_fn)


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a non-learned constant array (broadcastable against a)."""
    c = np.asarray(c, dtype=a.dtype)
    out = a.data * c

    def grad_fn(g):
        return (g * c,)

    return _make(out, (a,), grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    in_shape = a.shape
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(in_shape),)

    return _make(out, (a,), grad_fn)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def grad_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(out, (a,), grad_fn)


def concat(tensors, axis=0) -> Tensor:
    _dtype_of(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), grad_fn)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(a.data[idx])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), grad_fn)


def sum_all(a: Tensor) -> Tensor:
    out = np.array(a.data.sum(dtype=F64), dtype=a.dtype)

    def grad_fn(g):
        return (np.full_like(a.data, a.dtype.type(g)),)

    return _make(out, (a,), grad_fn)


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims {a.shape} vs {b.shape}")
    _dtype_of(a, b)
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), grad_fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., k] @ w[k, n] (+ bias). Leading axes flattened through one GEMM."""
    if w.data.ndim != 2:
        raise ShapeError("linear weight must be 2-D")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear dims {x.shape} vs {w.shape}")
    _dtype_of(x, w)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])

    if b is None:
        def grad_fn(g):
            g2 = g.reshape(-1, w.shape[1])
            return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2

        return _make(out, (x, w), grad_fn)

    def grad_fn(g):
        g2 = g.reshape(-1, w.shape[1])
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)

    return _make(out, (x, w, b), grad_fn)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with identical leading dims: [..., m, k] @ [..., k, n]."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm shapes {a.shape} vs {b.shape}")
    _dtype_of(a, b)
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), grad_fn)


# --- nonlinearities -------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    dt = x.dtype.type
    c, a3, half, one = dt(_GELU_C), dt(_GELU_A), dt(0.5), dt(1.0)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(c * (xd + a3 * x2 * xd))
    out = half * xd * (one + t)

    def grad_fn(g):
        du = c * (one + dt(3.0) * a3 * x2)
        d = half * (one + t) + half * xd * (one - t * t) * du
        return (g * d,)

    return _make(out, (x,), grad_fn)


def softmax_lastaxis(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction.

    The normalizing sum accumulates in float64 so the result agrees with the
    incremental decode kernels to well under 1e-5.
    """
    if not np.all(np.isfinite(x.data) | np.isneginf(x.data)):
        raise NonFiniteError("softmax input contains NaN/+Inf")
    m = np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    denom = e.sum(axis=-1, keepdims=True, dtype=F64)
    p = (e / denom).astype(x.dtype)

    def grad_fn(g):
        dot = np.sum(g * p, axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _make(p, (x,), grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax of a 2-D matrix (the documented module surface)."""
    if x.data.ndim != 2:
        raise ShapeError("softmax_rows expects a 2-D input")
    return softmax_lastaxis(x)


def layernorm(x: Tensor, w: Tensor, b: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis; moments accumulate in float64."""
    _dtype_of(x, w, b)
    dt = x.dtype
    mu = x.data.mean(axis=-1, keepdims=True, dtype=F64)
    xc = x.data - mu.astype(dt)
    var = np.mean(xc.astype(F64) ** 2, axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xn = xc * inv
    out = xn * w.data + b.data

    def grad_fn(g):
        n = x.shape[-1]
        gw_x = g * w.data
        # d/dx of (x - mu) * inv with mu, inv functions of x
        mean_g = gw_x.mean(axis=-1, keepdims=True)
        mean_gx = (gw_x * xn).mean(axis=-1, keepdims=True)
        gx = inv * (gw_x - mean_g - xn * mean_gx)
        gw = (g * xn).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        return gx, gw, gb

    return _make(out, (x, w, b), grad_fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), grad_fn)


def apply_additive_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Set masked entries to -inf before a softmax; gradient is zero there."""
    out = np.where(mask, x.dtype.type(-np.inf), x.data)
    keep = (~mask)

    def grad_fn(g):
        return (g * keep,)

    return _make(out, (x,), grad_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over masked positions.

    logits: [m, V]; targets: int[m]; mask: bool[m]. Raises EmptyLossError if
    nothing is masked in.
    """
    if logits.data.ndim != 2:
        raise ShapeError("cross_entropy expects 2-D logits")
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != (logits.shape[0],) or mask.shape != (logits.shape[0],):
        raise ShapeError("targets/mask must be 1-D of length m")
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("cross_entropy over an all-masked batch")
    if targets[mask].min() < 0 or targets[mask].max() >= logits.shape[1]:
        raise ShapeError("target id out of vocabulary range")
    if not np.isfinite(logits.data).all():
        raise NonFiniteError("non-finite logits in cross_entropy")
    dt = logits.dtype
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    denom = e.sum(axis=1, dtype=F64)
    lse = m[:, 0] + np.log(denom).astype(dt)
    picked = z[np.arange(z.shape[0]), targets]
    losses = lse - picked
    loss = np.array(losses[mask].sum(dtype=F64) / count, dtype=dt)

    def grad_fn(g):
        p = (e / denom[:, None]).astype(dt)
        p[np.arange(z.shape[0]), targets] -= dt.type(1.0)
        p *= (mask[:, None] * (float(g) / count)).astype(dt)
        return (p,)

    return _make(loss, (logits,), grad_fn)


# --- backward -------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss over the recorded graph."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if loss._spent:
        raise StaleGraphError("backward already ran on this graph; re-run the forward pass")
    if not loss.requires_grad:
        raise StaleGraphError("loss does not depend on any parameter")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        if node._spent:
            raise StaleGraphError("graph reuses a node consumed by an earlier backward")
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.accumulate_grad(g)
            continue
        parent_grads = node._grad_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            if p._grad_fn is None:
                p.accumulate_grad(pg)
            elif id(p) in grads:
                grads[id(p)] += pg
            else:
                grads[id(p)] = pg
        node._spent = True
        node._grad_fn = None
        node._parents = ()
    loss._spent = True


# --- parameter store -------------------------------------------------------

class ParamStore:
    """Named parameter tensors with sorted, deterministic iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True, dtype=data.dtype)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def tensors(self):
        for name in self.names():
            yield self._params[name]

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        if t.grad is None:
            return np.zeros_like(t.data)
        return t.grad

    def num_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self.items():
            out.add(name, t.data.copy())
        return out
