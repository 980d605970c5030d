"""Minimal reverse-mode network kit on numpy.

Every op takes :class:`Var` inputs and returns a new :class:`Var`. When a
:class:`Tape` is passed the op also records a closure that pushes the output
gradient back into its inputs; ``Tape.backward`` replays those closures in
reverse. :class:`Param` gradients persist and accumulate across backward
passes until zeroed, so summed multi-task losses can be built either as one
graph or as several backward calls.

Ops keep the dtype of their inputs. Parameters are float32; the gradient
auditor temporarily promotes them to float64 to get a clean reference.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, NonFiniteError, UsageError

DTYPE = np.float32


class Var:
    """A value in a recorded computation, with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _acc(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


class Param(Var):
    """A named trainable array. ``grad`` always exists and accumulates."""

    __slots__ = ("name", "frozen")

    def __init__(self, name: str, value):
        value = np.array(value, dtype=DTYPE)
        if value.ndim == 0 or any(s <= 0 for s in value.shape):
            raise ConfigError(f"parameter {name!r} needs positive dimensions, got {value.shape}")
        super().__init__(value, requires_grad=True)
        self.grad = np.zeros_like(value)
        self.name = name
        self.frozen = False

    def _acc(self, g) -> None:
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        flag = ", frozen" if self.frozen else ""
        return f"Param({self.name!r}, shape={self.value.shape}{flag})"


def const(x, dtype=DTYPE) -> Var:
    return Var(np.asarray(x, dtype=dtype))


class Tape:
    """Records backward closures of the ops run against it."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, fn: Callable[[], None]) -> None:
        self._ops.append(fn)

    def backward(self, out: Var, grad=1.0) -> None:
        """Seed ``out`` with ``grad`` and propagate through every recorded op.

        The tape is consumed; a second call without a new forward pass is an error.
        """
        if not self._ops:
            raise UsageError("backward called without a recorded forward pass")
        out._acc(np.broadcast_to(np.asarray(grad, dtype=out.value.dtype), out.shape))
        ops, self._ops = self._ops, []
        for fn in reversed(ops):
            fn()


def _track(tape: Tape | None, out: Var, inputs: Iterable[Var | None], fn) -> Var:
    if tape is not None and any(v is not None and v.requires_grad for v in inputs):
        out.requires_grad = True
        tape.record(fn)
    return out


def mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` for 2-D ``w``, flattening the leading axes of ``x`` into one GEMM."""
    if x.ndim == 2:
        return x @ w
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[-1],))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Var, b: Var, tape: Tape | None = None) -> Var:
    out = Var(a.value + b.value)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.shape))

    return _track(tape, out, (a, b), bwd)


def sub(a: Var, b: Var, tape: Tape | None = None) -> Var:
    out = Var(a.value - b.value)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._acc(-_unbroadcast(g, b.shape))

    return _track(tape, out, (a, b), bwd)


def mul(a: Var, b: Var, tape: Tape | None = None) -> Var:
    out = Var(a.value * b.value)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._acc(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * a.value, b.shape))

    return _track(tape, out, (a, b), bwd)


def relu(x: Var, tape: Tape | None = None) -> Var:
    y = np.maximum(x.value, 0)
    out = Var(y)

    def bwd():
        if out.grad is not None:
            x._acc(out.grad * (y > 0))

    return _track(tape, out, (x,), bwd)


def sigmoid(x: Var, tape: Tape | None = None) -> Var:
    y = _sigmoid(x.value)
    out = Var(y)

    def bwd():
        if out.grad is not None:
            x._acc(out.grad * y * (1 - y))

    return _track(tape, out, (x,), bwd)


def tanh(x: Var, tape: Tape | None = None) -> Var:
    y = np.tanh(x.value)
    out = Var(y)

    def bwd():
        if out.grad is not None:
            x._acc(out.grad * (1 - y * y))

    return _track(tape, out, (x,), bwd)


def abs_(x: Var, tape: Tape | None = None) -> Var:
    out = Var(np.abs(x.value))

    def bwd():
        if out.grad is not None:
            x._acc(out.grad * np.sign(x.value))

    return _track(tape, out, (x,), bwd)


def square(x: Var, tape: Tape | None = None) -> Var:
    out = Var(x.value * x.value)

    def bwd():
        if out.grad is not None:
            x._acc(2 * out.grad * x.value)

    return _track(tape, out, (x,), bwd)


def sum_(x: Var, axis: int | None = None, tape: Tape | None = None) -> Var:
    out = Var(np.asarray(x.value.sum(axis=axis)))

    def bwd():
        g = out.grad
        if g is None:
            return
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._acc(np.broadcast_to(g, x.shape))

    return _track(tape, out, (x,), bwd)


def reshape(x: Var, shape: tuple[int, ...], tape: Tape | None = None) -> Var:
    out = Var(x.value.reshape(shape))

    def bwd():
        if out.grad is not None:
            x._acc(out.grad.reshape(x.shape))

    return _track(tape, out, (x,), bwd)


def concat(xs: Sequence[Var], axis: int = -1, tape: Tape | None = None) -> Var:
    out = Var(np.concatenate([x.value for x in xs], axis=axis))
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bwd():
        if out.grad is None:
            return
        for x, g in zip(xs, np.split(out.grad, bounds, axis=axis)):
            if x.requires_grad:
                x._acc(g)

    return _track(tape, out, xs, bwd)


def stack(xs: Sequence[Var], axis: int = 0, tape: Tape | None = None) -> Var:
    out = Var(np.stack([x.value for x in xs], axis=axis))

    def bwd():
        if out.grad is None:
            return
        for i, x in enumerate(xs):
            if x.requires_grad:
                x._acc(np.take(out.grad, i, axis=axis))

    return _track(tape, out, xs, bwd)


def take(x: Var, index: np.ndarray, tape: Tape | None = None) -> Var:
    """Pick one entry along the last axis: ``out[...] = x[..., index[...]]``."""
    index = np.asarray(index)[..., None]
    out = Var(np.take_along_axis(x.value, index, axis=-1)[..., 0])

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(x.value)
        np.put_along_axis(g, index, out.grad[..., None], axis=-1)
        x._acc(g)

    return _track(tape, out, (x,), bwd)


def rows(x: Var, index, tape: Tape | None = None, unique: bool = False) -> Var:
    """Fancy-index the leading axes of ``x``.

    Repeated positions accumulate their gradients; ``unique=True`` promises
    there are none and uses a cheaper scatter.
    """
    out = Var(x.value[index])

    def bwd():
        if out.grad is None:
            return
        g = np.zeros_like(x.value)
        if unique:
            g[index] = out.grad
        else:
            np.add.at(g, index, out.grad)
        x._acc(g)

    return _track(tape, out, (x,), bwd)


def matmul(a: Var, b: Var, tape: Tape | None = None) -> Var:
    out = Var(np.matmul(a.value, b.value))

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a._acc(_unbroadcast(np.matmul(g, np.swapaxes(b.value, -1, -2)), a.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(np.matmul(np.swapaxes(a.value, -1, -2), g), b.shape))

    return _track(tape, out, (a, b), bwd)


def linear(x: Var, w: Param, b: Param | None = None, tape: Tape | None = None) -> Var:
    """``x @ w.T + b`` over the last axis of ``x``; ``w`` is [out, in]."""
    xv = x.value
    if xv.shape[-1] != w.shape[1] or (b is not None and b.shape != (w.shape[0],)):
        raise ConfigError(
            f"linear {getattr(w, 'name', '?')}: input width {xv.shape[-1]} vs weights {w.shape}"
        )
    y = mm(xv, w.value.T)
    if b is not None:
        y += b.value
    out = Var(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        g2 = g.reshape(-1, g.shape[-1])
        if w.requires_grad:
            w._acc(g2.T @ xv.reshape(-1, xv.shape[-1]))
        if b is not None and b.requires_grad:
            b._acc(g2.sum(axis=0))
        if x.requires_grad:
            x._acc(mm(g, w.value))

    return _track(tape, out, (x, w, b), bwd)


def _sigmoid(x):
    return 1 / (1 + np.exp(-x))


# ---------------------------------------------------------------------------
# layers


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Dense:
    """Fully connected layer with weights [out, in] and bias [out]."""

    def __init__(self, name: str, in_dim: int, out_dim: int, rng: np.random.Generator):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"{name}: dense layer needs positive widths, got {in_dim}->{out_dim}")
        self.w = Param(f"{name}.w", uniform_init(rng, in_dim, (out_dim, in_dim)))
        self.b = Param(f"{name}.b", uniform_init(rng, in_dim, (out_dim,)))

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def __call__(self, x: Var, tape: Tape | None = None) -> Var:
        return linear(x, self.w, self.b, tape)

    def params(self) -> list[Param]:
        return [self.w, self.b]


class Gru:
    """GRU cell.

    Gate convention (rows of ``w``/``u``/``b`` in this order)::

        z  = sigmoid(Wz x + Uz h + bz)
        r  = sigmoid(Wr x + Ur h + br)
        hc = tanh(Wh x + Uh (r * h) + bh)
        h' = (1 - z) * h + z * hc
    """

    def __init__(self, name: str, in_dim: int, hidden: int, rng: np.random.Generator):
        if in_dim <= 0 or hidden <= 0:
            raise ConfigError(f"{name}: GRU needs positive widths, got {in_dim}->{hidden}")
        self.w = Param(f"{name}.w", uniform_init(rng, hidden, (3 * hidden, in_dim)))
        self.u = Param(f"{name}.u", uniform_init(rng, hidden, (3 * hidden, hidden)))
        self.b = Param(f"{name}.b", uniform_init(rng, hidden, (3 * hidden,)))

    @property
    def hidden(self) -> int:
        return self.u.shape[1]

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    def params(self) -> list[Param]:
        return [self.w, self.u, self.b]

    def step(self, x: Var, h: Var, tape: Tape | None = None) -> Var:
        return gru_step(x, h, self, tape)

    def sequence(self, xs: Var, h0: Var, tape: Tape | None = None) -> Var:
        return gru_sequence(xs, h0, self, tape)


def _gru_cell(xw, h, u):
    d = h.shape[-1]
    uv = u.value
    hu = mm(h, uv[: 2 * d].T)
    z = _sigmoid(xw[..., :d] + hu[..., :d])
    r = _sigmoid(xw[..., d : 2 * d] + hu[..., d:])
    rh = r * h
    hc = np.tanh(xw[..., 2 * d :] + mm(rh, uv[2 * d :].T))
    h_new = (1 - z) * h + z * hc
    return h_new, (h, z, r, rh, hc)


def _gru_cell_backward(g, cache, u):
    """Returns (d pre-activation input projection, d h, d u)."""
    h, z, r, rh, hc = cache
    d = h.shape[-1]
    uv = u.value
    dz = g * (hc - h)
    dh = g * (1 - z)
    da_h = g * z * (1 - hc * hc)
    drh = mm(da_h, uv[2 * d :])
    dr = drh * h
    dh += drh * r
    da_z = dz * z * (1 - z)
    da_r = dr * r * (1 - r)
    da_zr = np.concatenate([da_z, da_r], axis=-1)
    dh += mm(da_zr, uv[: 2 * d])
    du = np.concatenate(
        [
            da_zr.reshape(-1, 2 * d).T @ h.reshape(-1, d),
            da_h.reshape(-1, d).T @ rh.reshape(-1, d),
        ],
        axis=0,
    )
    dxw = np.concatenate([da_zr, da_h], axis=-1)
    return dxw, dh, du


def _check_gru(gru: Gru, x_width: int, h_width: int) -> None:
    if x_width != gru.in_dim:
        raise ConfigError(f"{gru.w.name}: input width {x_width}, expected {gru.in_dim}")
    if h_width != gru.hidden:
        raise ConfigError(f"{gru.w.name}: hidden width {h_width}, expected {gru.hidden}")


def gru_step(x: Var, h: Var, gru: Gru, tape: Tape | None = None) -> Var:
    _check_gru(gru, x.shape[-1], h.shape[-1])
    xw = mm(x.value, gru.w.value.T) + gru.b.value
    h_new, cache = _gru_cell(xw, h.value, gru.u)
    out = Var(h_new)

    def bwd():
        if out.grad is None:
            return
        dxw, dh, du = _gru_cell_backward(out.grad, cache, gru.u)
        _project_backward(x, dxw, gru)
        if gru.u.requires_grad:
            gru.u._acc(du)
        if h.requires_grad:
            h._acc(dh)

    return _track(tape, out, (x, h, *gru.params()), bwd)


def gru_sequence(xs: Var, h0: Var, gru: Gru, tape: Tape | None = None) -> Var:
    """Run ``gru_step`` over the leading (time) axis of ``xs``; returns every hidden state.

    The input projection is batched over time and the whole recurrence is one
    tape entry, so backpropagation through time costs one closure.
    """
    _check_gru(gru, xs.shape[-1], h0.shape[-1])
    xw = mm(xs.value, gru.w.value.T) + gru.b.value
    hs = []
    caches = []
    h = h0.value
    for t in range(xw.shape[0]):
        h, cache = _gru_cell(xw[t], h, gru.u)
        hs.append(h)
        caches.append(cache)
    out = Var(np.stack(hs) if hs else np.zeros((0,) + h0.shape, dtype=h0.value.dtype))

    def bwd():
        g = out.grad
        if g is None:
            return
        dxw = np.empty_like(xw)
        carry = np.zeros_like(h0.value)
        du = np.zeros_like(gru.u.value)
        for t in range(xw.shape[0] - 1, -1, -1):
            dxw[t], carry, du_t = _gru_cell_backward(g[t] + carry, caches[t], gru.u)
            du += du_t
        _project_backward(xs, dxw, gru)
        if gru.u.requires_grad:
            gru.u._acc(du)
        if h0.requires_grad:
            h0._acc(carry)

    return _track(tape, out, (xs, h0, *gru.params()), bwd)


def _project_backward(x: Var, dxw: np.ndarray, gru: Gru) -> None:
    flat = dxw.reshape(-1, dxw.shape[-1])
    if gru.w.requires_grad:
        gru.w._acc(flat.T @ x.value.reshape(-1, x.shape[-1]))
    if gru.b.requires_grad:
        gru.b._acc(flat.sum(axis=0))
    if x.requires_grad:
        x._acc(mm(dxw, gru.w.value))


# ---------------------------------------------------------------------------
# optimisation


class RMSprop:
    """Root-mean-square propagation.

    ``sq <- alpha * sq + (1 - alpha) * g**2``; ``p <- p - lr * g / (sqrt(sq) + eps)``.
    Frozen parameters are skipped: neither their values nor their
    accumulators change.
    """

    def __init__(self, params: Iterable[Param], lr: float = 5e-4, alpha: float = 0.99, eps: float = 1e-5):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.alpha = alpha
        self.eps = eps
        self.square_avg = [np.zeros_like(p.value) for p in self.params]
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if not p.frozen and not np.isfinite(p.grad).all():
                raise NonFiniteError(f"non-finite gradient in {p.name}")
        for p, sq in zip(self.params, self.square_avg):
            if p.frozen:
                continue
            g = p.grad
            sq *= self.alpha
            sq += (1 - self.alpha) * g * g
            p.value -= lr * g / (np.sqrt(sq) + self.eps)
        for p in self.params:
            if not p.frozen and not np.isfinite(p.value).all():
                raise NonFiniteError(f"non-finite value in {p.name} after update")
        self.zero_grad()
        self.steps += 1


def clip_grad_norm(params: Iterable[Param], max_norm: float) -> float:
    """Scale trainable gradients so their joint L2 norm is at most ``max_norm``."""
    live = [p for p in params if not p.frozen]
    total = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in live)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in live:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# gradient audit


def finite_diff_check(
    loss_fn: Callable[[Tape | None], Var],
    params: Sequence[Param],
    eps: float = 1e-3,
) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn(tape)`` must build a scalar loss, recording on ``tape`` when one
    is given. Returns ``max |analytic - numeric| / max(1, |numeric|)`` over
    every entry of every parameter. The check runs in float64 and restores the
    original float32 values and gradients afterwards.
    """
    if not 1e-5 < eps < 1e-2:
        raise UsageError(f"finite-difference step must lie in (1e-5, 1e-2), got {eps}")
    saved = [(p.value, p.grad) for p in params]
    try:
        for p in params:
            p.value = p.value.astype(np.float64)
            p.grad = np.zeros_like(p.value)
        tape = Tape()
        loss = loss_fn(tape)
        if not np.isfinite(loss.value).all():
            raise NonFiniteError("non-finite loss at the unperturbed point")
        tape.backward(loss)
        worst = 0.0
        for p in params:
            analytic = p.grad
            flat = p.value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(loss_fn(None).value)
                flat[i] = orig - eps
                down = float(loss_fn(None).value)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                if not np.isfinite(numeric):
                    raise NonFiniteError(f"non-finite finite difference in {p.name}[{i}]")
                err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
        return worst
    finally:
        for p, (value, grad) in zip(params, saved):
            p.value = value
            p.grad = grad
