"""Dense tensors with reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that keeps
references to its operands and a closure mapping the output gradient to
operand gradients. :func:`backward` linearises that graph into a
:class:`ComputationTape` and walks it in reverse.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor", "ComputationTape", "ShapeError", "ContractViolation",
    "no_grad", "is_grad_enabled", "tensor", "as_tensor",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sqrt",
    "sigmoid", "relu", "gelu", "softmax", "log_softmax", "layer_norm",
    "sum", "mean", "reshape", "transpose", "swapaxes", "concat", "stack",
    "getitem", "embedding", "masked_fill", "l2_normalize",
    "cross_entropy", "softmax_cross_entropy", "mse",
    "backward", "finite_difference_check", "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractViolation(RuntimeError):
    """A documented precondition of an operation was broken."""


_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self, leaves=None):
        backward(self, leaves)


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    if dtype is not None:
        return Tensor(np.asarray(x, dtype=dtype))
    return Tensor(np.asarray(x))


def _coerce_pair(a, b):
    # python scalars adopt the dtype of the tensor operand so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _result(data, parents, backward_fn, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a, b = _coerce_pair(a, b)
    _check_broadcast(a, b, "div")

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), bw, "div")


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,), "exp")


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    y = np.sqrt(a.data)
    return _result(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")


def sigmoid(a):
    x = a.data
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,), "relu")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a):
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(y, (a,), bw, "gelu")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


# -- reductions and shape plumbing -------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(y), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return div(sum(a, axis, keepdims), float(n))


def reshape(a, shape):
    y = a.data.reshape(shape)
    return _result(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    y = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(y, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def getitem(a, idx):
    y = a.data[idx]

    advanced = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        out = np.zeros_like(a.data)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _result(np.array(y, copy=True), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    nd = ref.ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref.shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    y = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(y, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    y = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(y, tuple(tensors), bw, "stack")


def embedding(weight, ids):
    """Gather rows of ``weight`` (V, d) at integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    y = weight.data[ids]

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    return _result(y, (weight,), bw, "embedding")


def masked_fill(a, mask, value):
    """Replace entries where boolean ``mask`` is True by constant ``value``."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    y = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _result(y, (a,), lambda g: (np.where(mask, 0, g).astype(g.dtype, copy=False),), "masked_fill")


# -- normalisations -----------------------------------------------------------

def softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (a,), bw, "softmax")


def log_softmax(a, axis=-1):
    x = a.data
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (a,), bw, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean and unit (population) variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last extent of {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def bw(g):
        gxhat = g * gain.data
        gx = rstd / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                         - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _result(y, (x, gain, bias), bw, "layer_norm")


def l2_normalize(a, axis=-1, eps=1e-12):
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x / denom

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / denom,)

    return _result(y, (a,), bw, "l2_normalize")


# -- losses ---------------------------------------------------------------------

def _target_rows(target, n_classes, dtype):
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.ndim >= 1 and t.dtype.kind == "f" and t.shape[-1] == n_classes and t.ndim == 2:
        return t.astype(dtype, copy=False)
    idx = t.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise ContractViolation(f"class index outside [0, {n_classes})")
    return np.eye(n_classes, dtype=dtype)[idx]


def cross_entropy(pred, target, eps=0.0):
    """Mean negative log-likelihood of ``target`` under probability rows ``pred``.

    ``target`` is a vector of class indices or a matrix of one-hot rows.
    """
    if pred.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) probabilities, got {pred.shape}")
    row_sums = pred.data.sum(axis=-1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ContractViolation("probability rows must sum to 1 within 1e-6")
    onehot = _target_rows(target, pred.shape[-1], pred.dtype)
    if onehot.shape != pred.shape:
        raise ShapeError(f"cross_entropy target {onehot.shape} vs prediction {pred.shape}")
    n = pred.shape[0]
    p = pred.data
    chosen = (p * onehot).sum(axis=-1)
    y = np.asarray(-np.log(chosen + eps).sum() / n, dtype=pred.dtype)

    def bw(g):
        return (-g * onehot / (chosen + eps)[:, None] / n,)

    return _result(y, (pred,), bw, "cross_entropy")


def softmax_cross_entropy(logits, target, weights=None):
    """Cross-entropy of integer ``target`` under ``softmax(logits)`` along the last axis.

    ``weights`` (same shape as ``target``) scores positions; the result is the
    weighted mean, or 0 when no position carries weight.
    """
    x = logits.data
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: {t.shape[0]} targets for {flat.shape[0]} rows")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ContractViolation(f"class index outside [0, {c})")
    w = np.ones(t.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype).reshape(-1)
    total = w.sum()
    z = flat - flat.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(t.shape[0])
    nll = -logp[rows, t]
    if total == 0:
        y = np.asarray(0.0, dtype=x.dtype)
    else:
        y = np.asarray((nll * w).sum() / total, dtype=x.dtype)

    def bw(g):
        if total == 0:
            return (np.zeros_like(x),)
        p = np.exp(logp)
        p[rows, t] -= 1.0
        gx = g * p * (w / total)[:, None]
        return (gx.reshape(x.shape).astype(x.dtype, copy=False),)

    return _result(y, (logits,), bw, "softmax_cross_entropy")


def mse(pred, target):
    pred, target = _coerce_pair(pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    d = pred - target
    return mean(d * d)


# -- differentiation ---------------------------------------------------------

class ComputationTape:
    """Topologically ordered record of the graph feeding one output.

    Built from the output tensor by an iterative depth-first walk, so every
    operand precedes its consumer and each node appears once.
    """

    def __init__(self, output):
        self.output = output
        order = []
        seen = set()
        stack = [(output, False)]
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
        self.nodes = order
        self._ids = {id(n) for n in order}

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, t):
        return id(t) in self._ids

    @property
    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def ops(self):
        return [n.op for n in self.nodes]


def backward(loss, leaves=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    ``leaves``, when given, lists parameters whose ``grad`` is set to zeros if
    the loss does not depend on them. The graph below ``loss`` is released
    afterwards.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        if leaves is not None:
            for p in leaves:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
        return
    tape = ComputationTape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if not p.requires_grad or pg is None:
                continue
            if pg.dtype != p.data.dtype:
                pg = pg.astype(p.data.dtype)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    for node in tape.nodes:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
    if leaves is not None:
        for p in leaves:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# -- gradient checking --------------------------------------------------------

class GradCheckReport:
    def __init__(self, tolerance):
        self.tolerance = tolerance
        self.errors = {}
        self.worst_index = {}
        self.failed_entries = {}

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    def failures(self):
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={self.max_error:.3e}, params={len(self.errors)})"


def finite_difference_check(f, params, step=1e-5, tolerance=1e-4, floor=1e-5, grads=None):
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``params`` is a mapping name -> Tensor (or a sequence of tensors). The
    relative error of entry i is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    ``grads`` may supply analytic gradients to audit instead of running
    backward. Raises ContractViolation when two forward passes disagree.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    first = f()
    second = f()
    if not np.array_equal(first.data, second.data):
        raise ContractViolation("f is not deterministic; gradient check aborted")

    if grads is None:
        for p in params.values():
            p.grad = None
        backward(f(), leaves=list(params.values()))
        grads = {k: p.grad.copy() for k, p in params.items()}

    report = GradCheckReport(tolerance)
    with no_grad():
        for name, p in params.items():
            analytic = np.asarray(grads[name], dtype=np.float64)
            numeric = np.zeros_like(analytic)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = float(f().data)
                flat[i] = orig - step
                down = float(f().data)
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * step)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
            rel = np.abs(analytic - numeric) / denom
            report.errors[name] = float(rel.max()) if rel.size else 0.0
            report.worst_index[name] = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else ()
            bad = np.argwhere(rel >= tolerance)
            report.failed_entries[name] = [tuple(int(v) for v in row) for row in bad]
    return report
