"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every differentiable op computes its result with numpy and, when at least one
input requires a gradient, records a :class:`Node` on the active :class:`Tape`.
``backward`` then replays the tape in reverse recording order.

Only scalar broadcasting is supported; every binary op requires equal shapes.
Tensors may carry an optional leading batch axis; ops that care about the
channel axis (``conv2d``, ``concat_channels``) treat it as axis ``-3``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, ShapeError

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass(eq=False)
class Node:
    inputs: tuple
    output: Tensor
    backward_fn: BackwardFn
    tape: "Tape"
    index: int


class Tape:
    """Ordered record of differentiable ops for one step.

    Use as a context manager to make it the active tape; ops executed inside
    the block are recorded on it. Nodes are appended as ops run, so inputs are
    always recorded before the nodes that consume them. Leaving the block
    releases the graph, so call ``backward`` inside it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, inputs, output: Tensor, backward_fn: BackwardFn) -> Node:
        node = Node(tuple(inputs), output, backward_fn, self, len(self.nodes))
        self.nodes.append(node)
        output.tape_node = node
        return node

    def reset(self) -> None:
        for node in self.nodes:
            node.output.tape_node = None
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()
        # nodes and their outputs reference each other; break the cycle so
        # step buffers are freed now rather than at the next full collection
        self.reset()


_DEFAULT_TAPE = Tape()
_TAPE_STACK: list[Optional[Tape]] = [_DEFAULT_TAPE]


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1]


def default_tape() -> Tape:
    return _DEFAULT_TAPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording; results never require grad."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = needs
    out.grad = None
    out.tape_node = None
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _check_same_shape(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


# -- elementwise arithmetic -------------------------------------------------


def add(x: Tensor, y: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(y, Tensor):
        c = float(y)
        return _result(x.data + c, (x,), lambda g: (g,))
    _check_same_shape("add", x, y)
    return _result(x.data + y.data, (x, y), lambda g: (g, g))


def sub(x: Tensor, y: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(y, Tensor):
        c = float(y)
        return _result(x.data - c, (x,), lambda g: (g,))
    _check_same_shape("sub", x, y)
    return _result(x.data - y.data, (x, y), lambda g: (g, -g))


def mul(x: Tensor, y: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(y, Tensor):
        return scale(x, y)
    _check_same_shape("mul", x, y)
    xd, yd = x.data, y.data
    return _result(xd * yd, (x, y), lambda g: (g * yd, g * xd))


mul_elementwise = mul


def scale(x: Tensor, c: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(c, Tensor):
        return mul(x, c)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


# -- nonlinearities ---------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0) or np.any(np.isnan(d)):
        raise DomainError("log: all entries must be strictly positive")
    return _result(np.log(d), (x,), lambda g: (g / d,))


def reciprocal(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d == 0):
        raise DomainError("reciprocal: division by zero")
    return _result(1.0 / d, (x,), lambda g: (-g / (d * d),))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where clipping is active."""
    d = x.data
    inside = (d >= lo) & (d <= hi)
    return _result(np.clip(d, lo, hi), (x,), lambda g: (g * inside,))


# -- structure --------------------------------------------------------------


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if len(xs) == 0:
        raise ShapeError("concat_channels: need at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    if len(ref) < 3:
        raise ShapeError(f"concat_channels: expected C x H x W tensors, got {ref}")
    for t in xs[1:]:
        if len(t.shape) != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: spatial mismatch {ref} vs {t.shape}")
    sizes = [t.shape[-3] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[..., bounds[i]:bounds[i + 1], :, :] for i in range(len(xs)))

    return _result(np.concatenate([t.data for t in xs], axis=-3), tuple(xs), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# -- reductions -------------------------------------------------------------


def _norm_axes(x: Tensor, axes) -> tuple:
    if axes is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    nd = x.data.ndim
    out = []
    for a in axes:
        if not -nd <= a < nd:
            raise ShapeError(f"axis {a} out of range for shape {x.shape}")
        out.append(a % nd)
    return tuple(sorted(set(out)))


def sum(x: Tensor, axes=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    if x.size == 0:
        raise ShapeError("sum: empty reduction")
    ax = _norm_axes(x, axes)
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(np.sum(x.data, axis=ax), (x,), backward_fn)


def mean(x: Tensor, axes=None) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean: empty reduction")
    ax = _norm_axes(x, axes)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / count, shape).copy(),)

    return _result(np.sum(x.data, axis=ax) / count, (x,), backward_fn)


def sq_norm(x: Tensor) -> Tensor:
    """Squared Frobenius norm as a scalar tensor."""
    if x.size == 0:
        raise ShapeError("sq_norm: empty reduction")
    d = x.data
    return _result(np.array(np.vdot(d, d)), (x,), lambda g: (2.0 * g * d,))


# -- convolution ------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation with zero padding.

    ``x`` is ``C_in x H x W`` or ``N x C_in x H x W``; ``kernel`` is
    ``C_out x C_in x k x k``; ``bias`` is ``C_out``.
    """
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be C_out x C_in x k x k, got {kernel.shape}")
    c_out, c_in, k, _ = kernel.shape
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={c_out}")
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    p = int(padding)
    h_out, w_out = h + 2 * p - k + 1, w + 2 * p - k + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    # windows: n, c, h_out, w_out, k, k -> n, c*k*k, h_out*w_out
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = cols.transpose(0, 1, 4, 5, 2, 3).reshape(n, c_in * k * k, h_out * w_out)
    wmat = kernel.data.reshape(c_out, c_in * k * k)
    out = (wmat @ cols).reshape(n, c_out, h_out, w_out)
    out += bias.data[:, None, None]
    if not batched:
        out = out[0]

    def backward_fn(g):
        g3 = (g if batched else g[None]).reshape(n, c_out, h_out * w_out)
        gk = gb = gx = None
        if kernel.requires_grad:
            gk = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = (wmat.T @ g3).reshape(n, c_in, k, k, h_out, w_out)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h_out, j:j + w_out] += gcols[:, :, i, j]
            gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
            if not batched:
                gx = gx[0]
        return gx, gk, gb

    return _result(out, (x, kernel, bias), backward_fn)


# -- gradient plumbing ------------------------------------------------------


class _StopCache:
    """Record/replay of stop-gradient values, driven by :func:`grad_check`.

    Recording stores each value seen by :func:`stop_value` during the analytic
    pass; replay hands the same values back, in order, during the perturbed
    evaluations. Central differences then measure the gradient of the
    surrogate objective that the tape actually differentiates.
    """

    def __init__(self):
        self.mode: Optional[str] = None
        self.values: list = []
        self.pos = 0


_STOPS = _StopCache()


def stop_value(v):
    """Identity outside :func:`grad_check`; see :class:`_StopCache`."""
    c = _STOPS
    if c.mode == "record":
        c.values.append(np.array(v, copy=True) if isinstance(v, np.ndarray) else v)
        return v
    if c.mode == "replay":
        if c.pos >= len(c.values):
            raise ShapeError("grad_check: f made more stop-gradient calls than in its analytic pass")
        out = c.values[c.pos]
        c.pos += 1
        return out
    return v


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = stop_value(x.data)
    out.requires_grad = False
    out.grad = None
    out.tape_node = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad ancestor of ``loss``.

    Leaf gradients accumulate across calls; intermediate tensors receive the
    gradient of this call only.
    """
    if loss.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    node = loss.tape_node
    if node is None:
        loss.grad = np.ones(()) if loss.grad is None else loss.grad + 1.0
        return
    pending: dict[int, np.ndarray] = {id(loss): np.ones(())}
    nodes = node.tape.nodes
    for nd in reversed(nodes[: node.index + 1]):
        g = pending.pop(id(nd.output), None)
        if g is None:
            continue
        nd.output.grad = g
        grads = nd.backward_fn(g)
        for inp, gi in zip(nd.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.tape_node is not None and inp.tape_node.tape is nd.tape:
                key = id(inp)
                prev = pending.get(key)
                pending[key] = gi if prev is None else prev + gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


# -- finite-difference verification -----------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    floor: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    step: float = 1e-6,
    tol: float = 1e-5,
    floor: float = 1e-6,
    hold_stops: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` against central differences.

    ``x`` may be a single tensor or several; each is perturbed in place one
    entry at a time, and ``f`` is called with the first of them. Tensors that
    ``f`` reads by closure (model parameters) work the same way.

    With ``hold_stops`` the perturbed evaluations reuse the base-point value
    of every ``detach``/``stop_value``, so the check compares against the
    objective the tape differentiates rather than the fully live function.
    """
    if step <= 0:
        raise ShapeError("grad_check: step must be positive")
    if _STOPS.mode is not None:
        raise ShapeError("grad_check cannot be nested")
    xs = [x] if isinstance(x, Tensor) else list(x)
    arg = xs[0]
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    def replay() -> float:
        _STOPS.pos = 0
        v = f(arg).item()
        if hold_stops and _STOPS.pos != len(_STOPS.values):
            raise ShapeError("grad_check: f made fewer stop-gradient calls than in its analytic pass")
        return v

    try:
        _STOPS.mode, _STOPS.values = "record", []
        with Tape():
            out = f(arg)
            if out.size != 1:
                raise ShapeError("grad_check: f must return a scalar")
            backward(out)
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]
        # a central difference of f carries roughly eps_mach * |f| / step of
        # rounding noise; entries smaller than noise / tol are compared at
        # that absolute level instead of relatively
        noise = np.finfo(np.float64).eps * max(abs(out.item()), 1.0) / step
        floor = max(floor, noise / tol)
        _STOPS.mode = "replay" if hold_stops else None
        worst = 0.0
        count = 0
        with no_grad():
            for t, ga in zip(xs, analytic):
                if not t.data.flags.c_contiguous:
                    raise ShapeError("grad_check: tensors must be C-contiguous")
                flat = t.data.reshape(-1)
                numeric = np.empty_like(flat)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = replay()
                    flat[i] = orig - step
                    fm = replay()
                    flat[i] = orig
                    numeric[i] = (fp - fm) / (2.0 * step)
                err = relative_error(ga.reshape(-1), numeric, floor)
                worst = max(worst, float(err.max(initial=0.0)))
                count += flat.size
    finally:
        _STOPS.mode, _STOPS.values, _STOPS.pos = None, [], 0
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
    return GradCheckReport(worst, tol, count, floor)
