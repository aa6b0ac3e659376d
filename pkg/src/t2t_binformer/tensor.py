"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every op is define-by-run: calling it computes the forward value and, when any
input requires a gradient, appends a node to the active :class:`Tape`. The tape
is append-only, so node inputs always precede the node, and ``backward`` walks
it once in strict reverse order.

Broadcasting is limited to leading-axis repetition: in ``add(a, b)`` the shape
of ``b`` must equal a suffix of the shape of ``a``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class UsageError(RuntimeError):
    """The tape was used incorrectly (non-scalar loss, consumed graph, ...)."""


class Node(NamedTuple):
    op: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn


class Tape:
    """Append-only record of differentiable ops for one training context."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: tuple["Tensor", ...], backward: BackwardFn) -> int:
        self.nodes.append(Node(op, inputs, backward))
        return len(self.nodes) - 1

    def reset(self) -> None:
        self.nodes = []
        self.generation += 1

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor requiring a gradient")
        if loss.node_id is None:
            # the loss is itself a leaf
            loss._accumulate(np.ones_like(loss.data))
            return
        if loss._tape is not self or loss._generation != self.generation:
            raise UsageError("loss was not recorded on this tape (graph already consumed?)")

        pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = pending.pop(nid, None)
            if g is None:
                continue
            node = self.nodes[nid]
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node_id is None:
                    t._accumulate(gi)
                elif t.node_id in pending:
                    pending[t.node_id] = pending[t.node_id] + gi
                else:
                    pending[t.node_id] = gi
        self.reset()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; ops inside return constant tensors."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """An n-dimensional float64 array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape", "_generation")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"tensors must have every dim >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self._generation = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        tape = self._tape if self._tape is not None else current_tape()
        tape.backward(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence]


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.node_id = None
    out._tape = None
    out._generation = -1
    if _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs):
        tape = current_tape()
        out.requires_grad = True
        out.node_id = tape.record(op, inputs, backward)
        out._tape = tape
        out._generation = tape.generation
    return out


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"{op}: shape {b.shape} is not broadcastable to {a.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + shape).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "add")
    bshape = b.shape
    return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, bshape)), "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "subtract")
    bshape = b.shape
    return _make(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, bshape)), "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "multiply")
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "multiply")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _make(xd * cdf, (x,), backward, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and normalisation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward(g):
        # out * (g - <g, out>) without materialising g * out
        dots = np.expand_dims(np.einsum("...i,...i->...", np.moveaxis(g, axis, -1),
                                        np.moveaxis(out, axis, -1)), axis)
        gx = g - dots
        gx *= out
        return (gx,)

    return _make(out, (x,), backward, "softmax")


ATTENTION_BLOCK = 64


def _attention_probs(qs: np.ndarray, kt: np.ndarray) -> np.ndarray:
    s = qs @ kt
    s -= s.max(axis=1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float, block: int = ATTENTION_BLOCK) -> Tensor:
    """``softmax(scale * q @ k.T) @ v`` for 2-D ``q, k, v`` as one tape node.

    Query rows are processed in blocks so the score matrix never exists in
    full; the backward pass recomputes each block's probabilities instead of
    storing them.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    scale = float(scale)
    qs = q.data * scale
    kd, vd = k.data, v.data
    kt = np.ascontiguousarray(kd.T)
    n = qs.shape[0]
    out = np.empty((n, vd.shape[1]))
    for i in range(0, n, block):
        out[i : i + block] = _attention_probs(qs[i : i + block], kt) @ vd

    def backward(g):
        gq = np.empty_like(qs)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        vt = vd.T
        for i in range(0, n, block):
            rows = slice(i, i + block)
            p = _attention_probs(qs[rows], kt)
            gv += p.T @ g[rows]
            gs = g[rows] @ vt
            # sum_j dP_ij P_ij equals <g_i, out_i>
            gs -= np.einsum("ij,ij->i", g[rows], out[rows])[:, None]
            gs *= p
            gq[rows] = gs @ kd
            gk += gs.T @ qs[rows]
        gq *= scale
        return gq, gk, gv

    return _make(out, (q, k, v), backward, "attention")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match last dim {d}")
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data

    def backward(g):
        gxhat = g * gd
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        ggamma = (lead * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gbeta = lead.sum(axis=0) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# ---------------------------------------------------------------------------
# reductions and structure


def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from e
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def slice_(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(np.array(x.data[index]), (x,), backward, "slice")


# ---------------------------------------------------------------------------
# sliding windows


def conv_output_side(side: int, k: int, s: int, p: int) -> int:
    return (side + 2 * p - k) // s + 1


def _unfold_array(x: np.ndarray, k: int, s: int, p: int) -> np.ndarray:
    c, h, w = x.shape
    oh, ow = conv_output_side(h, k, s, p), conv_output_side(w, k, s, p)
    xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    # (C, oh, ow, k, k) -> (oh, ow, C, k, k)
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(oh * ow, c * k * k)


def _fold_array(rows: np.ndarray, c: int, h: int, w: int, k: int, s: int, p: int) -> np.ndarray:
    oh, ow = conv_output_side(h, k, s, p), conv_output_side(w, k, s, p)
    cols = rows.reshape(oh, ow, c, k, k)
    out = np.zeros((c, h + 2 * p, w + 2 * p))
    for di in range(k):
        for dj in range(k):
            out[:, di : di + s * (oh - 1) + 1 : s, dj : dj + s * (ow - 1) + 1 : s] += (
                cols[:, :, :, di, dj].transpose(2, 0, 1)
            )
    return out[:, p : p + h, p : p + w]


def _check_window(h: int, w: int, k: int, s: int, p: int) -> None:
    if k < 1 or s < 1 or p < 0:
        raise ShapeError(f"invalid window k={k}, s={s}, p={p}")
    if h + 2 * p < k or w + 2 * p < k:
        raise ShapeError(f"window {k}x{k} larger than padded input {h + 2 * p}x{w + 2 * p}")


def unfold(x: Tensor, k: int, s: int, p: int) -> Tensor:
    """Extract zero-padded ``k x k`` windows of a ``C x H x W`` tensor.

    Returns ``L x (C*k*k)`` with windows in raster order and each row laid out
    channel-major, then kernel row, then kernel column.
    """
    if x.ndim != 3:
        raise ShapeError(f"unfold expects C x H x W, got {x.shape}")
    c, h, w = x.shape
    _check_window(h, w, k, s, p)
    return _make(_unfold_array(x.data, k, s, p), (x,),
                 lambda g: (_fold_array(g, c, h, w, k, s, p),), "unfold")


def fold(rows: Tensor, h: int, w: int, k: int, s: int, p: int) -> Tensor:
    """Scatter-add windows back to ``C x H x W``; the adjoint of :func:`unfold`."""
    _check_window(h, w, k, s, p)
    n_win = conv_output_side(h, k, s, p) * conv_output_side(w, k, s, p)
    if rows.ndim != 2 or rows.shape[0] != n_win or rows.shape[1] % (k * k):
        raise ShapeError(f"fold: rows {rows.shape} inconsistent with {n_win} windows of {k}x{k}")
    c = rows.shape[1] // (k * k)
    return _make(_fold_array(rows.data, c, h, w, k, s, p), (rows,),
                 lambda g: (_unfold_array(g, k, s, p),), "fold")


def overlap_counts(h: int, w: int, k: int, s: int, p: int) -> np.ndarray:
    """Number of windows covering each pixel, shape ``H x W``."""
    _check_window(h, w, k, s, p)
    n_win = conv_output_side(h, k, s, p) * conv_output_side(w, k, s, p)
    return _fold_array(np.ones((n_win, k * k)), 1, h, w, k, s, p)[0]


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-5,
    tol: float = 1e-3,
    max_checks: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments and closes over the tensors in ``x``, which are
    perturbed in place. Per-element relative error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``. With
    ``max_checks`` a seeded random subset of coordinates of each tensor is
    checked.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    with Tape() as tape:
        for t in xs:
            t.grad = None
        loss = f()
        tape.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    with no_grad():
        for t, a in zip(xs, analytic):
            t.data = np.ascontiguousarray(t.data)
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_checks is not None and flat.size > max_checks:
                idx = rng.choice(flat.size, size=max_checks, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                ana = a.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
                count += 1
    for t in xs:
        t.grad = None
    return GradCheckReport(worst, count, tol)
