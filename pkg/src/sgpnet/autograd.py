"""Tape-based reverse-mode differentiation over a closed set of array ops.

Usage::

    with Tape() as tape:
        loss = ag.sum(ag.sigmoid(x * w))
    tape.backward(loss)       # fills w.grad

Only tensors derived from a non-frozen :class:`Param` inside an active tape
are recorded; everything else is evaluated eagerly as a constant.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as tc

_local = threading.local()

NORM_EPS = 1e-8
NEIGHBOUR_SHIFTS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


class TapeError(RuntimeError):
    pass


def _stack(name: str) -> list:
    st = getattr(_local, name, None)
    if st is None:
        st = []
        setattr(_local, name, st)
    return st


def current_tape() -> "Tape | None":
    st = _stack("tapes")
    return st[-1] if st else None


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple
    backward: Callable


class Tape:
    """Records ops in forward execution order; consumed by one backward call."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").pop()
        return False

    def backward(self, loss: "Tensor") -> None:
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise TapeError("tape already consumed; re-run the forward pass")
        self.consumed = True
        if loss._tape is not self:
            self.nodes = []
            return
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                if isinstance(parent, Param):
                    parent.grad += pg
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        self.nodes = []


def backward(loss: "Tensor") -> None:
    if loss._tape is None:
        raise TapeError("loss was not recorded on a tape")
    loss._tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Param(Tensor):
    """Named learnable array with gradient and momentum buffers."""

    def __init__(self, name: str, value, frozen: bool = False):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=not frozen)
        self.name = name
        self.frozen = frozen
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
        out._tape = tape
    return out


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Stop-gradient values that must stay fixed under finite differencing
# ---------------------------------------------------------------------------

class StopGradientPin:
    """Records stop-gradient values once, then replays them in call order."""

    def __init__(self):
        self.values: list = []
        self.replaying = False
        self._cursor = 0

    def replay(self) -> "StopGradientPin":
        self.replaying = True
        self._cursor = 0
        return self

    def __enter__(self):
        self._cursor = 0
        _stack("pins").append(self)
        return self

    def __exit__(self, *exc):
        _stack("pins").pop()
        return False

    def fetch(self, compute: Callable):
        if not self.replaying:
            v = compute()
            self.values.append(v)
            return v
        if self._cursor >= len(self.values):
            raise TapeError("replay requested more stop-gradient values than recorded")
        v = self.values[self._cursor]
        self._cursor += 1
        return v


def pinned(compute: Callable):
    """Evaluate a stop-gradient quantity, honouring an active pin."""
    st = _stack("pins")
    return st[-1].fetch(compute) if st else compute()


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).value.copy())


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.value > lo
    return _make(np.where(keep, a.value, lo), (a,), lambda g: (g * keep,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = tc.sigmoid(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(tc.softplus(av), (a,), lambda g: (g * tc.sigmoid(av),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# Shape and reductions
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.value.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.value.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.value.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.value[idx], (a,), bw)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    sizes = [t.value.shape[axis] for t in items]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.value for t in items], axis=axis), items,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _make(np.stack([t.value for t in items], axis=axis), items, bw)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum without ellipsis or repeated indices per operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    sizes = dict(zip(sa, a.value.shape)) | dict(zip(sb, b.value.shape))

    def grad_for(g, other, so, target):
        avail = set(out_sub) | set(so)
        kept = "".join(c for c in target if c in avail)
        r = np.einsum(f"{out_sub},{so}->{kept}", g, other)
        if kept != target:
            r = r.reshape([sizes[c] if c in kept else 1 for c in target])
            r = np.broadcast_to(r, [sizes[c] for c in target])
        return r

    av, bv = a.value, b.value
    return _make(np.einsum(subscripts, av, bv), (a, b),
                 lambda g: (grad_for(g, bv, sb, sa), grad_for(g, av, sa, sb)))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = tc.softmax(a.value, axis=axis)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def l2norm(a, axis: int, keepdims: bool = True, eps: float = NORM_EPS) -> Tensor:
    """Euclidean norm; the backward uses ``max(norm, eps)`` to stay finite at 0."""
    a = as_tensor(a)
    av = a.value
    n = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * av / np.maximum(n, eps),)

    return _make(n if keepdims else np.squeeze(n, axis), (a,), bw)


# ---------------------------------------------------------------------------
# Spatial ops
# ---------------------------------------------------------------------------

def neighbours8(a) -> Tensor:
    """``[..., h, w] -> [..., 8, h, w]`` with value at site + shift, 0 off-grid."""
    a = as_tensor(a)
    h, w = a.value.shape[-2:]
    pad = [(0, 0)] * (a.value.ndim - 2) + [(1, 1), (1, 1)]
    ap = np.pad(a.value, pad)
    out = np.stack([ap[..., 1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                    for dy, dx in NEIGHBOUR_SHIFTS], axis=-3)

    def bw(g):
        gp = np.zeros(ap.shape)
        for n, (dy, dx) in enumerate(NEIGHBOUR_SHIFTS):
            gp[..., 1 + dy:1 + dy + h, 1 + dx:1 + dx + w] += g[..., n, :, :]
        return (gp[..., 1:-1, 1:-1],)

    return _make(out, (a,), bw)


def spectral_bands(x, masks) -> Tensor:
    """Band-limit ``x [B,C,h,w]`` by each half-spectrum mask in ``masks [K,h,wr]``.

    Returns ``[B, C, K, h, w]``. The mask gradient is taken with respect to the
    conjugate-symmetric mask implied by the half spectrum, so it is exact for
    masks that depend only on radial frequency.
    """
    x, masks = as_tensor(x), as_tensor(masks)
    h, w = x.value.shape[-2:]
    if masks.value.shape[-2:] != (h, w // 2 + 1):
        raise tc.ShapeError(
            f"mask grid {masks.value.shape[-2:]} does not match feature map {(h, w)}")
    X = tc.rfft2(x.value)
    mv = masks.value
    out = tc.irfft2(X[:, :, None] * mv, w)
    col_w = tc.half_spectrum_weights(w)

    def bw(g):
        G = tc.rfft2(g)
        gx = tc.irfft2(np.einsum("khv,bckhv->bchv", mv, G), w)
        gm = np.einsum("bchv,bckhv->khv", X, np.conj(G)).real * col_w
        return gx, gm

    return _make(out, (x, masks), bw)


def resize(a, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of the last two axes (half-pixel centres)."""
    a = as_tensor(a)
    H, W = a.value.shape[-2:]
    Ry = tc.interp_matrix(H, out_hw[0])
    Rx = tc.interp_matrix(W, out_hw[1])
    out = Ry @ a.value @ Rx.T
    return _make(out, (a,), lambda g: (Ry.T @ g @ Rx,))


def conv2d(x, weight, bias, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding, ``x [B,Ci,H,W]``, ``weight [Co,Ci,kh,kw]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    B, Ci, H, W = x.value.shape
    Co, Ci2, kh, kw = weight.value.shape
    if Ci2 != Ci:
        raise tc.ShapeError(f"conv2d weight {weight.shape} vs input {x.shape}")
    p, s = padding, stride
    xp = np.pad(x.value, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    Ho, Wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Ci * kh * kw)
    wm = weight.value.reshape(Co, -1)
    out = (cols @ wm.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2) + bias.value[None, :, None, None]

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (gm.T @ cols).reshape(weight.value.shape)
        gb = g.sum(axis=(0, 2, 3))
        gcols = (gm @ wm).reshape(B, Ho, Wo, Ci, kh, kw)
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, p:p + H, p:p + W], gw, gb

    return _make(out, (x, weight, bias), bw)


def maxpool2d(a, k: int) -> Tensor:
    """Stride-1 ``k x k`` max pooling with replicate padding, same output size."""
    a = as_tensor(a)
    if k % 2 != 1:
        raise ValueError("pool window must be odd")
    r = k // 2
    shape = a.value.shape
    H, W = shape[-2:]
    flat = a.value.reshape(-1, H, W)
    iy = np.clip(np.arange(-r, H + r), 0, H - 1)
    ix = np.clip(np.arange(-r, W + r), 0, W - 1)
    padded = flat[:, iy[:, None], ix[None, :]]
    win = sliding_window_view(padded, (k, k), axis=(1, 2)).reshape(flat.shape[0], H, W, k * k)
    arg = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        sy = np.clip(np.arange(H)[:, None] + arg // k - r, 0, H - 1)
        sx = np.clip(np.arange(W)[None, :] + arg % k - r, 0, W - 1)
        n = np.broadcast_to(np.arange(flat.shape[0])[:, None, None], arg.shape)
        gin = np.zeros(flat.shape)
        np.add.at(gin, (n, sy, sx), g.reshape(flat.shape))
        return (gin.reshape(shape),)

    return _make(out.reshape(shape), (a,), bw)


def minpool2d(a, k: int) -> Tensor:
    return neg(maxpool2d(neg(a), k))


# ---------------------------------------------------------------------------
# Optimisation and gradient checking
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Param], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """Momentum SGD: ``v <- mu*v + (g + wd*p)``, ``p <- p - lr*v``."""
    for p in params:
        if p.frozen:
            continue
        d = p.grad + weight_decay * p.value
        if momentum:
            p.velocity = momentum * p.velocity + d
            d = p.velocity
        p.value -= lr * d


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    n_checked: int
    skipped: bool = False


@dataclass
class GradcheckReport:
    checks: list[ParamCheck] = field(default_factory=list)

    def max_error(self) -> float:
        return max((c.max_rel_error for c in self.checks), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return all(c.max_rel_error <= tol for c in self.checks)

    def __getitem__(self, name: str) -> ParamCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


class NondeterminismError(RuntimeError):
    pass


def rel_error(a, n) -> np.ndarray:
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def gradcheck(f: Callable[[], Tensor], params: Sequence[Param], eps: float = 1e-5,
              freeze_tau: bool = True, max_elements: int | None = None,
              seed: int = 0) -> GradcheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` takes no arguments and reads the current values of ``params``.
    With ``freeze_tau`` the stop-gradient quantities seen in the baseline
    evaluation are replayed during every perturbed evaluation.
    ``max_elements`` samples that many entries per parameter array.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grads(params)
    pin = StopGradientPin() if freeze_tau else None

    def evaluate() -> float:
        if pin is None:
            return float(f().value)
        with pin.replay():
            return float(f().value)

    if pin is None:
        with Tape() as tape:
            loss = f()
    else:
        with pin, Tape() as tape:
            loss = f()
    base = float(loss.value)
    tape.backward(loss)
    if evaluate() != base:
        raise NondeterminismError("two baseline evaluations of f differ")

    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for p in params:
        analytic = p.grad.copy()
        if p.frozen:
            report.checks.append(ParamCheck(p.name, float(np.max(np.abs(analytic), initial=0.0)), 0, True))
            continue
        flat_idx = np.arange(p.value.size)
        if max_elements is not None and p.value.size > max_elements:
            flat_idx = np.sort(rng.choice(p.value.size, max_elements, replace=False))
        worst = 0.0
        view = p.value.reshape(-1)
        for i in flat_idx:
            orig = view[i]
            view[i] = orig + eps
            fp = evaluate()
            view[i] = orig - eps
            fm = evaluate()
            view[i] = orig
            num = (fp - fm) / (2 * eps)
            worst = max(worst, float(rel_error(analytic.reshape(-1)[i], num)))
        report.checks.append(ParamCheck(p.name, worst, len(flat_idx)))
    zero_grads(params)
    return report

