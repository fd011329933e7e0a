"""Dense float64 tensors with reverse-mode autodiff, seeded RNG streams and
finite-difference checking.

Every operation builds a fresh graph node; ``backward`` orders the nodes
reachable from a scalar seed into a :class:`Tape` and runs the recorded
backward rules in reverse.
"""

from __future__ import annotations

import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count(1)


def _consumed(g):
    raise RuntimeError("graph already consumed by a previous backward pass")


class NumericalError(ValueError):
    """Raised when a forward value or gradient is NaN/Inf."""


class ShapeError(ValueError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        if op == "leaf":
            arr = np.array(data, dtype=np.float64)
        else:
            arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("tensor is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Nodes reachable from a seed, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_seed(cls, seed: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(seed, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and p.node_id not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(seed: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar ``seed``.

    Returns ``{leaf.node_id: gradient}`` for every requires_grad leaf reachable
    from the seed and also stores each gradient on ``leaf.grad`` (overwriting).
    The graph is released afterwards, so a second call on the same seed fails.
    """
    if seed.data.size != 1:
        raise ShapeError(f"backward seed must be scalar, got shape {seed.shape}")
    if not seed.requires_grad:
        raise ValueError("seed is not on a tape (no input requires grad)")
    if seed._backward is _consumed:
        raise ValueError("graph already consumed by a previous backward pass")
    if tape is None:
        tape = Tape.from_seed(seed)
    elif not tape.nodes or tape.nodes[-1] is not seed:
        raise ValueError("seed is not the last node of the given tape")

    pending: dict[int, np.ndarray] = {seed.node_id: np.ones_like(seed.data)}
    out: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            out[node.node_id] = g
            node.grad = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in pending:
                pending[p.node_id] = pending[p.node_id] + pg
            else:
                pending[p.node_id] = pg
        node._backward = _consumed
        node._parents = ()
    for g in out.values():
        _check_finite(g, "gradient")
    return out


def grad(seed: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``seed`` wrt ``wrt``; zeros for unreachable leaves."""
    grads = backward(seed)
    return [grads.get(t.node_id, np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` for x [n, in], w [out, in], b [out]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"affine: x {x.shape}, w {w.shape}, b {b.shape}")

    def bw(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _make(x.data @ w.data.T + b.data, (x, w, b), bw, "affine")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: {old} -> {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return x if x.ndim == 2 else reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericalError("log of non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sign(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _make(np.sign(x.data), (x,), lambda g: (np.zeros_like(x.data),), "sign")


def clamp(x: Tensor, lo=None, hi=None) -> Tensor:
    """Clip into [lo, hi]; bounds may be scalars or arrays (not differentiated)."""
    x = as_tensor(x)
    lo_a = -np.inf if lo is None else (lo.data if isinstance(lo, Tensor) else lo)
    hi_a = np.inf if hi is None else (hi.data if isinstance(hi, Tensor) else hi)
    out = np.clip(x.data, lo_a, hi_a)
    inside = (x.data >= lo_a) & (x.data <= hi_a)
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


def _axis_size(shape, axis) -> int:
    if axis is None:
        return int(np.prod(shape))
    axes = (axis,) if isinstance(axis, int) else axis
    return int(np.prod([shape[a] for a in axes]))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / _axis_size(x.shape, axis))


def norm(x: Tensor, p, axis=None) -> Tensor:
    """L1, L2 or Linf norm (``p`` in {1, 2, inf}) over ``axis`` (all by default)."""
    x = as_tensor(x)
    if p == 1:
        return sum(absolute(x), axis=axis)
    if p == 2:
        sq = np.sum(x.data * x.data, axis=axis, keepdims=True)
        n = np.sqrt(sq)

        def bw(g):
            gg = g if axis is None else np.expand_dims(g, axis)
            safe = np.where(n > 0, n, 1.0)
            return (gg * np.where(n > 0, x.data / safe, 0.0),)

        out = n.reshape(()) if axis is None else np.squeeze(n, axis)
        return _make(out, (x,), bw, "norm2")
    if p in (np.inf, "inf"):
        a = np.abs(x.data)
        m = np.max(a, axis=axis, keepdims=True)
        hit = (a == m)
        # ties share the subgradient evenly
        share = hit / np.sum(hit, axis=axis, keepdims=True)

        def bw(g):
            gg = g if axis is None else np.expand_dims(g, axis)
            return (gg * share * np.sign(x.data),)

        out = m.reshape(()) if axis is None else np.squeeze(m, axis)
        return _make(out, (x,), bw, "norminf")
    raise ValueError(f"unsupported norm {p!r}")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of [n, k] logits against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    n = logits.shape[0]
    rows = np.arange(n)
    logp = log_softmax_np(logits.data)
    per = -logp[rows, labels]
    p = np.exp(logp)

    if reduction == "none":
        def bw(g):
            d = p.copy()
            d[rows, labels] -= 1.0
            return (d * g[:, None],)
        return _make(per, (logits,), bw, "ce")
    if reduction != "mean":
        raise ValueError(reduction)

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _make(np.array(per.mean()), (logits,), bw, "ce")


def sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """Per-row squared Euclidean distance over all non-batch axes -> [n]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_dist: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    axes = tuple(range(1, a.ndim))
    out = np.sum(diff * diff, axis=axes) if axes else diff * diff

    def bw(g):
        gg = g.reshape((-1,) + (1,) * len(axes))
        return 2.0 * gg * diff, -2.0 * gg * diff

    return _make(out, (a, b), bw, "sqdist")


# ---------------------------------------------------------------- conv2d


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols, oh, ow


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """Cross-correlation of x [n, c, h, w] with w [o, c, kh, kw], zero padding."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: x {x.shape}, w {w.shape}, b {b.shape}")
    if stride not in (1, 2):
        raise ValueError("conv2d stride must be 1 or 2")
    o, c, kh, kw = w.shape
    n = x.shape[0]
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    # [n*oh*ow, c*kh*kw]
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    wm = w.data.reshape(o, -1)
    out = (mat @ wm.T + b.data).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (gm.T @ mat).reshape(w.shape)
        gb = gm.sum(axis=0)
        gcols = (gm @ wm).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding, oh, ow)
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), (x, w, b), bw, "conv2d")


# ---------------------------------------------------------------- rng


class Rng:
    """Seeded generator whose child streams are derived from string labels.

    ``Rng(seed).child("init")`` always yields the same stream regardless of
    what else was drawn from the parent.
    """

    def __init__(self, seed: int, label: str = ""):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.label = label
        self._gen = np.random.Generator(np.random.PCG64(self._key()))

    def _key(self) -> int:
        h = hashlib.sha256(f"{self.seed}/{self.label}".encode()).digest()
        return int.from_bytes(h[:8], "little")

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, f"{self.label}/{label}" if self.label else label)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def reparameterize(mu: Tensor, logvar: Tensor, rng: Rng | None) -> Tensor:
    """``mu + exp(logvar / 2) * eps`` with eps ~ N(0, 1); ``rng=None`` returns mu."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError(f"reparameterize: {mu.shape} vs {logvar.shape}")
    if rng is None:
        return mu
    eps = rng.normal(mu.shape)
    return add(mu, mul(exp(mul(logvar, 0.5)), eps))


# ---------------------------------------------------------------- gradient check


@dataclass
class FiniteDiffReport:
    max_rel_err: float
    passed: bool
    excluded: list[tuple[int, ...]]
    checked: int

    @property
    def pass_(self) -> bool:
        return self.passed


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5, tol: float = 1e-6,
                      kinks: Callable[[Tensor], Iterable[np.ndarray]] | None = None) -> FiniteDiffReport:
    """Compare autodiff gradients of a scalar ``fn`` against central differences.

    A coordinate is excluded when perturbing it by +-h flips the activation
    pattern of any relu/abs/clamp node in the graph (a kink within h).
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    y = fn(x)
    if y.data.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued fn")
    ref_pattern = _kink_pattern(y)
    analytic = backward(y).get(x.node_id, np.zeros_like(base))

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    excluded: list[tuple[int, ...]] = []
    for i in range(flat.size):
        vals = []
        flipped = False
        for s in (h, -h):
            xp = flat.copy()
            xp[i] += s
            out = fn(Tensor(xp.reshape(base.shape), requires_grad=True))
            if not np.all(np.isfinite(out.data)):
                raise NumericalError("fn non-finite at perturbed point")
            if _kink_pattern(out) != ref_pattern:
                flipped = True
            vals.append(float(np.asarray(out.data).reshape(-1)[0]))
        if flipped:
            excluded.append(np.unravel_index(i, base.shape))
            continue
        numeric[i] = (vals[0] - vals[1]) / (2 * h)

    ga = analytic.reshape(-1)
    mask = np.ones(flat.size, bool)
    for idx in excluded:
        mask[np.ravel_multi_index(idx, base.shape)] = False
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(numeric)), 1e-8)
    rel = np.abs(ga - numeric) / denom
    worst = float(rel[mask].max()) if mask.any() else 0.0
    return FiniteDiffReport(worst, worst <= tol, [tuple(int(v) for v in e) for e in excluded], int(mask.sum()))


_KINK_OPS = ("relu", "abs", "clamp", "norminf", "sign")


def _graph_nodes(y: Tensor) -> list[Tensor]:
    out, seen, stack = [], set(), [y]
    while stack:
        n = stack.pop()
        if n.node_id in seen:
            continue
        seen.add(n.node_id)
        out.append(n)
        stack.extend(n._parents)
    return out


def _kink_pattern(y: Tensor) -> tuple:
    # ordered by op sequence; graph shapes are identical across probes
    pats = []
    for n in _graph_nodes(y):
        if n.op in _KINK_OPS and n._parents:
            src = n._parents[0].data
            if n.op == "relu":
                pats.append((src > 0).tobytes())
            elif n.op in ("abs", "sign"):
                pats.append(np.sign(src).tobytes())
            elif n.op == "norminf":
                pats.append(np.argmax(np.abs(src)).tobytes())
            else:
                pats.append((n.data == src).tobytes())
    return tuple(sorted(pats))

