"""Reverse-mode automatic differentiation over numpy arrays.

A small tape in the micrograd style, vectorized: every operation produces a
new :class:`Tensor` that records its parent tensors and a closure computing
vector-Jacobian products against raw ndarrays. :func:`backward` walks the
recorded graph once in reverse topological order and returns a dict mapping
leaf tensors to their gradients, so two backward passes never share state
and per-worker gradient buffers can be reduced by plain summation.

Only float32 and float64 data participate in differentiation.  Mixing the
two in one expression is rejected rather than silently promoted; python
scalars and plain arrays are cast to the dtype of the tensor they meet.

Gradient conventions worth stating once:

* ``abs`` uses sign(0) = 0, ``relu``/``clamp`` take the zero subgradient at
  their kinks, and ``where_mask`` routes gradients by a constant boolean
  mask decided at forward time.
* ``exclusive_cumprod_one_minus`` requires inputs strictly below 1; its
  backward divides by (1 - a) and callers are expected to clamp upstream.
"""

import threading

import numpy as np
from scipy.special import expit

from . import kernels

_ALLOWED = (np.float32, np.float64)

# name -> callable, populated by @primitive; the unit tests iterate this to
# enforce finite-difference coverage of every registered op.
PRIMITIVES = {}


def primitive(fn):
    PRIMITIVES[fn.__name__] = fn
    return fn


class NonFiniteError(RuntimeError):
    """A scalar loss (or one of its parts) stopped being finite."""


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "tag")

    # keep numpy from broadcasting ndarray <op> Tensor into object arrays;
    # NotImplemented falls through to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, tag="leaf"):
        data = np.asarray(data)
        if data.dtype not in _ALLOWED:
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.tag = tag

    @property
    def needs_grad(self):
        return self.requires_grad or self.vjp is not None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor({self.tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def __abs__(self):
        return absolute(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)

    def item(self):
        return float(self.data)


def _wrap(x, like):
    """Coerce a constant to a Tensor with the companion's dtype."""
    if isinstance(x, Tensor):
        if isinstance(like, Tensor) and x.dtype != like.dtype:
            raise TypeError(f"dtype mismatch: {x.dtype} vs {like.dtype}")
        return x
    dtype = like.dtype if isinstance(like, Tensor) else np.float64
    return Tensor(np.asarray(x, dtype=dtype), tag="const")


def constant(x, dtype=None, tag="const"):
    """Non-differentiable Tensor; keeps a floating dtype, else float64."""
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return Tensor(arr, tag=tag)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class _GradMode(threading.local):
    # per-thread stack so worker threads can toggle recording independently
    def __init__(self):
        self.stack = [True]


_grad_mode = _GradMode()


class no_grad:
    """Context manager: ops inside build no graph (pure forward evaluation)."""

    def __enter__(self):
        _grad_mode.stack.append(False)

    def __exit__(self, *exc):
        _grad_mode.stack.pop()
        return False


def _make(data, parents, vjp, tag):
    need = _grad_mode.stack[-1] and any(p.needs_grad for p in parents)
    if not need:
        return Tensor(data, tag=tag)
    return Tensor(data, parents=tuple(parents), vjp=vjp, tag=tag)


# -- arithmetic ---------------------------------------------------------

@primitive
def add(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.needs_grad else None,
                _unbroadcast(g, b.data.shape) if b.needs_grad else None)
    return _make(a.data + b.data, (a, b), vjp, "add")


@primitive
def sub(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if a.needs_grad else None,
                _unbroadcast(-g, b.data.shape) if b.needs_grad else None)
    return _make(a.data - b.data, (a, b), vjp, "sub")


@primitive
def mul(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if a.needs_grad else None,
                _unbroadcast(g * a.data, b.data.shape) if b.needs_grad else None)
    return _make(a.data * b.data, (a, b), vjp, "mul")


@primitive
def div(a, b):
    a = _wrap(a, b)
    b = _wrap(b, a)
    def vjp(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.needs_grad else None
        gb = None
        if b.needs_grad:
            gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb
    return _make(a.data / b.data, (a, b), vjp, "div")


@primitive
def neg(a):
    def vjp(g):
        return (-g,)
    return _make(-a.data, (a,), vjp, "neg")


@primitive
def pow_const(a, p):
    p = float(p)
    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)
    return _make(a.data ** p, (a,), vjp, "pow")


@primitive
def matmul(a, b):
    """Matrix product; supports 2D weights and stacked (batched) operands."""
    a = _wrap(a, b)
    b = _wrap(b, a)
    def vjp(g):
        ga = gb = None
        if a.needs_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.needs_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb
    return _make(a.data @ b.data, (a, b), vjp, "matmul")


# -- shape --------------------------------------------------------------

@primitive
def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    def vjp(g):
        return (g.reshape(old),)
    return _make(a.data.reshape(shape), (a,), vjp, "reshape")


@primitive
def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    def vjp(g):
        return (g.transpose(inv),)
    return _make(a.data.transpose(axes), (a,), vjp, "transpose")


@primitive
def getitem(a, key):
    """Basic (slice/int/ellipsis) indexing only; use gather for index arrays."""
    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)
    return _make(a.data[key], (a,), vjp, "getitem")


@primitive
def concat(parts, axis=0):
    parts = list(parts)
    ref = next((p for p in parts if isinstance(p, Tensor)), None)
    parts = [_wrap(p, ref) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece if p.needs_grad else None
                     for piece, p in zip(pieces, parts))
    return _make(np.concatenate([p.data for p in parts], axis=axis),
                 parts, vjp, "concat")


@primitive
def gather(a, idx):
    """Select rows of a 2D array by an integer index vector (repeats allowed)."""
    idx = np.asarray(idx)
    def vjp(g):
        ga = np.zeros_like(a.data)
        kernels.scatter_add_rows(ga, idx, np.ascontiguousarray(g))
        return (ga,)
    return _make(a.data[idx], (a,), vjp, "gather")


# -- reductions ---------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a % len(shape) for a in ax)
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@primitive
def tsum(a, axis=None, keepdims=False):
    shape = a.data.shape
    def vjp(g):
        return (_expand_reduced(g, shape, axis, keepdims).copy(),)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


@primitive
def tmean(a, axis=None, keepdims=False):
    shape = a.data.shape
    count = a.data.size if axis is None else np.prod(
        [shape[ax % len(shape)] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    def vjp(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)
    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp, "mean")


# -- elementwise nonlinearities ------------------------------------------

@primitive
def sin(a):
    def vjp(g):
        return (g * np.cos(a.data),)
    return _make(np.sin(a.data), (a,), vjp, "sin")


@primitive
def cos(a):
    def vjp(g):
        return (-g * np.sin(a.data),)
    return _make(np.cos(a.data), (a,), vjp, "cos")


@primitive
def exp(a):
    out_data = np.exp(a.data)
    def vjp(g):
        return (g * out_data,)
    return _make(out_data, (a,), vjp, "exp")


@primitive
def log(a):
    def vjp(g):
        return (g / a.data,)
    return _make(np.log(a.data), (a,), vjp, "log")


@primitive
def sqrt(a):
    out_data = np.sqrt(a.data)
    def vjp(g):
        return (g * (0.5 / out_data),)
    return _make(out_data, (a,), vjp, "sqrt")


@primitive
def sigmoid(a):
    out_data = expit(a.data)
    def vjp(g):
        return (g * out_data * (1.0 - out_data),)
    return _make(out_data, (a,), vjp, "sigmoid")


@primitive
def softplus(a, beta=100.0):
    """log(1 + exp(beta x)) / beta, linear above beta*x > 30 for stability."""
    bx = beta * a.data
    out_data = np.where(bx > 30.0, a.data, np.log1p(np.exp(np.minimum(bx, 30.0))) / beta)
    out_data = out_data.astype(a.data.dtype, copy=False)
    def vjp(g):
        return (g * expit(bx),)
    return _make(out_data, (a,), vjp, "softplus")


@primitive
def absolute(a):
    def vjp(g):
        return (g * np.sign(a.data),)
    return _make(np.abs(a.data), (a,), vjp, "abs")


@primitive
def relu(a):
    def vjp(g):
        return (g * (a.data > 0),)
    return _make(np.maximum(a.data, 0), (a,), vjp, "relu")


@primitive
def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient is zero outside the open interval."""
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones(a.data.shape, dtype=bool)
    if lo is not None:
        inside &= a.data > lo
    if hi is not None:
        inside &= a.data < hi
    def vjp(g):
        return (g * inside,)
    return _make(out_data, (a,), vjp, "clamp")


@primitive
def where_mask(mask, a, b):
    """Select a where mask else b; mask is a constant boolean array."""
    a = _wrap(a, b)
    b = _wrap(b, a)
    mask = np.asarray(mask, dtype=bool)
    def vjp(g):
        ga = gb = None
        if a.needs_grad:
            ga = _unbroadcast(np.where(mask, g, 0.0), a.data.shape)
        if b.needs_grad:
            gb = _unbroadcast(np.where(mask, 0.0, g), b.data.shape)
        return ga, gb
    return _make(np.where(mask, a.data, b.data), (a, b), vjp, "where")


@primitive
def exclusive_cumprod_one_minus(a):
    """T[..., i] = prod_{j<i} (1 - a[..., j]) along the last axis, T[..., 0] = 1.

    Inputs must be strictly below 1 (clamp upstream); the backward pass
    divides by (1 - a).
    """
    one_minus = 1.0 - a.data
    prod = np.cumprod(one_minus, axis=-1)
    out_data = np.ones_like(a.data)
    out_data[..., 1:] = prod[..., :-1]
    def vjp(g):
        gt = g * out_data
        # suffix[j] = sum_{k > j} g[k] T[k]
        suffix = np.zeros_like(gt)
        rev = np.cumsum(gt[..., ::-1], axis=-1)[..., ::-1]
        suffix[..., :-1] = rev[..., 1:]
        return (-suffix / np.maximum(one_minus, 1e-12),)
    return _make(out_data, (a,), vjp, "cumprod1m")


# -- graph walk ----------------------------------------------------------

def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.needs_grad:
                stack.append((p, False))
    return order


def _first_non_finite(root):
    # forward (leaves-first) order so the origin is reported, not the last op
    for node in _topo(root):
        if not np.all(np.isfinite(node.data)):
            return node
    return root


def backward(loss):
    """Propagate from a scalar loss; returns {leaf Tensor: gradient array}.

    Leaves are tensors with requires_grad and no recorded parents; tensors
    not reachable from the loss simply do not appear in the result.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar, got shape {loss.data.shape}")
    if not np.isfinite(loss.data):
        bad = _first_non_finite(loss)
        raise NonFiniteError(
            f"non-finite loss; first non-finite intermediate: op '{bad.tag}' "
            f"shape {bad.data.shape}")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            if node.requires_grad:
                result[node] = result[node] + g if node in result else g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.needs_grad:
                continue
            pg = pg.astype(parent.data.dtype, copy=False)
            if pg.shape != parent.data.shape:
                pg = pg.reshape(parent.data.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def spatial_gradient(point, field):
    """d(field)/d(point) for a pointwise scalar field.

    ``point`` is an (..., 3) array; ``field`` maps a Tensor of that shape to
    per-point scalar values.  Because each output depends only on its own
    point, the gradient of the summed output recovers per-point gradients.
    """
    p = Tensor(np.asarray(point, dtype=np.float64), requires_grad=True, tag="point")
    out = field(p)
    grads = backward(tsum(out))
    g = grads.get(p)
    if g is None:
        g = np.zeros_like(p.data)
    return g


# -- parameter store ------------------------------------------------------

class ParamStore:
    """Named leaf tensors plus accumulated gradient buffers.

    Training mutates ``tensor.data`` in place so graphs rebuilt every
    iteration keep pointing at the same leaves.  Gradient buffers live here
    (not on tensors) so several backward passes can be reduced by summation
    before an optimizer step.
    """

    def __init__(self):
        self._entries = {}

    def add(self, name, value, trainable=True, dtype=None):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        arr = np.array(value, dtype=dtype if dtype is not None else None)
        if arr.dtype not in _ALLOWED:
            arr = arr.astype(np.float64)
        t = Tensor(arr, requires_grad=trainable, tag=name)
        self._entries[name] = {"tensor": t, "trainable": trainable,
                               "grad": np.zeros_like(arr)}
        return t

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        return self._entries[name]["tensor"]

    def names(self):
        return list(self._entries)

    def trainable_names(self):
        return [n for n, e in self._entries.items() if e["trainable"]]

    def set_trainable(self, name, flag):
        e = self._entries[name]
        e["trainable"] = flag
        e["tensor"].requires_grad = flag

    def grad(self, name):
        return self._entries[name]["grad"]

    def zero_grad(self):
        for e in self._entries.values():
            e["grad"][...] = 0.0

    def accumulate(self, gradmap):
        for e in self._entries.values():
            g = gradmap.get(e["tensor"])
            if g is not None:
                e["grad"] += g

    def state_dict(self):
        return {n: e["tensor"].data.copy() for n, e in self._entries.items()}

    def load_state_dict(self, state):
        for n, arr in state.items():
            if n not in self._entries:
                raise KeyError(f"unknown parameter in state: {n}")
            dst = self._entries[n]["tensor"].data
            arr = np.asarray(arr)
            if arr.shape != dst.shape:
                raise ValueError(f"shape mismatch for {n}: {arr.shape} vs {dst.shape}")
            dst[...] = arr.astype(dst.dtype)

    def n_parameters(self):
        return int(np.sum([e["tensor"].data.size for e in self._entries.values()]))


# -- finite-difference oracle ---------------------------------------------

class FdEntry:
    def __init__(self, name, max_rel_err, worst_index, analytic, numeric):
        self.name = name
        self.max_rel_err = max_rel_err
        self.worst_index = worst_index
        self.analytic = analytic
        self.numeric = numeric

    def __repr__(self):
        return (f"FdEntry({self.name}, max_rel_err={self.max_rel_err:.3e}, "
                f"at={self.worst_index})")


class FdReport:
    def __init__(self, entries, tolerance):
        self.entries = entries
        self.tolerance = tolerance

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries.values()), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def __repr__(self):
        worst = max(self.entries.values(), key=lambda e: e.max_rel_err, default=None)
        return (f"FdReport(passed={self.passed}, max_rel_err={self.max_rel_err:.3e}, "
                f"worst={worst and worst.name})")


def fd_check(eval_fn, store, step=1e-5, tolerance=1e-4, names=None,
             denom_floor=1e-12):
    """Compare analytic gradients of eval_fn(store) against central differences.

    ``eval_fn`` must deterministically build a scalar Tensor from the store's
    tensors.  Relative error per element is |a - n| / max(|a|, |n|, 1e-12).
    Every element of every (selected) trainable entry is checked, so keep
    configurations small.
    """
    loss = eval_fn(store)
    grads = backward(loss)
    check = names if names is not None else store.trainable_names()
    entries = {}
    for name in check:
        t = store[name]
        analytic = grads.get(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = float(eval_fn(store).data)
            flat[i] = keep - step
            lo = float(eval_fn(store).data)
            flat[i] = keep
            numeric[i] = (hi - lo) / (2.0 * step)
        numeric = numeric.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), denom_floor)
        rel = np.abs(analytic - numeric) / denom
        worst = np.unravel_index(np.argmax(rel), rel.shape) if rel.size else ()
        entries[name] = FdEntry(name, float(rel.max(initial=0.0)), worst,
                                analytic, numeric)
    return FdReport(entries, tolerance)
