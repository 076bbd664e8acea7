"""A small tape-based reverse-mode autodiff engine over numpy arrays.

The op set is deliberately closed: matmul, add, scale, transpose, reshape,
concat_rows, softmax, layer_norm, gelu, linear and mse_loss. That is all the
reconstruction model needs. Any op whose inputs require gradients records a
backward closure; :func:`backward` walks the graph once in reverse
topological order and then frees it.

Model code runs in float32; gradient checks run the same code in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

_DEBUG = False
_GRAD_ENABLED = True


def set_debug(flag: bool) -> None:
    """When on, every op asserts its output is finite."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, self.dtype), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        if isinstance(c, (int, float, np.floating)):
            return scale(self, float(c))
        return NotImplemented

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


class Parameter(Tensor):
    """A leaf tensor that owns an accumulated gradient and a stable name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def _not_scalar(t):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# --- primitives -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        return (g * c,)

    return _make(a.data * a.dtype.type(c), (a,), bw, "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def transpose(a, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ValueError("transpose needs at least 2 dimensions")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}") from exc

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), bw, "reshape")


def concat_rows(tensors) -> Tensor:
    """Concatenate along the second-to-last axis."""
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat_rows needs at least one tensor")
    ref = ts[0].shape
    for t in ts:
        if t.ndim != len(ref) or t.shape[:-2] != ref[:-2] or t.shape[-1] != ref[-1]:
            raise ValueError(f"concat_rows: incompatible shapes {[t.shape for t in ts]}")
    sizes = [t.shape[-2] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=-2))

    return _make(np.concatenate([t.data for t in ts], axis=-2), ts, bw, "concat_rows")


def softmax(a) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a learnable gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * x * (1 + k * x2))
    out = 0.5 * x * (1 + t)

    def bw(g):
        dt = (1 - t * t) * c * (1 + 3 * k * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)

    return _make(out, (a,), bw, "gelu")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    parents = (x, weight)
    out = x.data @ weight.data
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents = parents + (bias,)
    fan_in, fan_out = weight.shape

    def bw(g):
        grads = [None, None, None]
        if x.requires_grad:
            grads[0] = g @ weight.data.T
        g2 = g.reshape(-1, fan_out)
        if weight.requires_grad:
            grads[1] = x.data.reshape(-1, fan_in).T @ g2
        if bias is not None and bias.requires_grad:
            grads[2] = g2.sum(axis=0)
        return tuple(grads[: len(parents)])

    return _make(out, parents, bw, "linear")


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over all elements."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)

    def bw(g):
        gp = g * (2.0 / count) * diff
        return gp, -gp

    return _make(out, (pred, target), bw, "mse_loss")


# --- backward pass --------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Intermediate gradients live only for the duration of the call and the
    graph is released afterwards, so calling twice on the same loss is an
    error; repeated forward+backward accumulates into leaves additively.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype).reshape(p.shape)
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._backward = None


# --- finite-difference checking -------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float = 0.0
    per_parameter: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.failures and self.checked > 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.checked} coordinates, max relative error "
            f"{self.max_rel_error:.3e} (tolerance {self.tolerance:g})"
        )


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(
    closure,
    params,
    tolerance: float = 1e-4,
    coords_per_param: int = 20,
    h: float = 1e-3,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``closure()`` must rebuild the loss from the current parameter values.
    Parameters should be float64 for the comparison to be meaningful.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(closure())
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for p in params:
        flat = p.data.reshape(-1)
        count = min(coords_per_param, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + h
                f_plus = closure().item()
                flat[c] = orig - h
                f_minus = closure().item()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            exact = float(analytic[p.name].reshape(-1)[c])
            err = relative_error(exact, numeric, floor)
            worst = max(worst, err)
            report.checked += 1
            if not err < tolerance:
                report.failures.append((p.name, int(c), exact, numeric, err))
        report.per_parameter[p.name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    for p in params:
        p.zero_grad()
    return report
