"""Dense float64 layer operations, their backward rules, and a gradient checker.

Every primitive comes as a forward function plus an explicit backward rule.
`GradTape` strings them together: each call through the tape records a
closure, and `GradTape.backward` replays the closures in reverse order.

Shapes follow the usual "batch first" convention. Functions that the model
applies per sentence also accept a leading batch axis, so a whole minibatch
runs through one numpy call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


def as_matrix(values, rows=None, cols=None) -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally checking its shape."""
    m = np.array(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {m.ndim}-D")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


def _nonempty(x: np.ndarray, what: str) -> None:
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError(f"{what}: empty input")


# ---------------------------------------------------------------- affine

def affine(x, W, b):
    """W @ x + b for a vector x, or row-wise for a batch of shape (B, D)."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"affine: x{x.shape}, W{W.shape}, b{b.shape} do not agree"
        )
    return x @ W.T + b


def affine_backward(dy, x, W):
    """Return (dx, dW, db) given the upstream gradient dy."""
    dx = dy @ W
    if dy.ndim == 1:
        dW = np.outer(dy, x)
        db = dy.copy()
    else:
        dW = dy.T @ x
        db = dy.sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------- convolution

def _windows(X: np.ndarray, w: int) -> np.ndarray:
    # (..., d, T) -> (..., L, d*w) with column order (d, w)
    L = X.shape[-1] - w + 1
    cols = np.stack([X[..., k:k + L] for k in range(w)], axis=-1)  # (..., d, L, w)
    cols = np.moveaxis(cols, -2, -3)  # (..., L, d, w)
    return cols.reshape(*X.shape[:-2], L, X.shape[-2] * w)


def temporal_convolution(X, filters, bias):
    """Slide a bank of width-w filters along the time axis.

    X has shape (d, T) or (B, d, T); filters (F, d, w); bias (F,).
    Returns a feature map of shape (..., F, T - w + 1) whose entry (f, t) is
    the inner product of filter f with columns t..t+w-1 of X, plus bias[f].
    """
    X = np.asarray(X, dtype=np.float64)
    filters = np.asarray(filters, dtype=np.float64)
    if filters.ndim != 3 or X.ndim not in (2, 3) or X.shape[-2] != filters.shape[1]:
        raise ShapeError(f"conv: X{X.shape} incompatible with filters{filters.shape}")
    F, d, w = filters.shape
    T = X.shape[-1]
    if T < w:
        raise ShapeError(f"conv: sequence length {T} shorter than window {w}")
    patches = _windows(X, w)
    out = patches @ filters.reshape(F, d * w).T + bias  # (..., L, F)
    return np.swapaxes(out, -1, -2)


def temporal_convolution_backward(dout, X, filters):
    """Return (dX, dfilters, dbias) for `temporal_convolution`."""
    F, d, w = filters.shape
    T = X.shape[-1]
    L = T - w + 1
    dout_t = np.swapaxes(dout, -1, -2)  # (..., L, F)
    patches = _windows(X, w)
    flat_p = patches.reshape(-1, d * w)
    flat_g = dout_t.reshape(-1, F)
    dfilters = (flat_g.T @ flat_p).reshape(F, d, w)
    dbias = flat_g.sum(axis=0)
    dpatch = (dout_t @ filters.reshape(F, d * w)).reshape(*dout_t.shape[:-1], d, w)
    dX = np.zeros_like(X)
    for k in range(w):
        # dpatch[..., t, :, k] flows to X[..., :, t + k]
        dX[..., :, k:k + L] += np.swapaxes(dpatch[..., k], -1, -2)
    return dX, dfilters, dbias


# -------------------------------------------------------- elementwise etc.

def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


def max_over_time(fm):
    """Per-filter maximum over the last axis, plus the argmax (ties -> first)."""
    fm = np.asarray(fm, dtype=np.float64)
    _nonempty(fm, "max_over_time")
    idx = np.argmax(fm, axis=-1)
    return np.take_along_axis(fm, idx[..., None], axis=-1)[..., 0], idx


def max_over_time_backward(dy, idx, length):
    dfm = np.zeros((*idx.shape, length))
    np.put_along_axis(dfm, idx[..., None], dy[..., None], axis=-1)
    return dfm


def dropout(x, keep, rng=None, train=True):
    """Inverted dropout. Returns (y, mask); at evaluation time y is x itself."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"keep probability must lie in (0, 1], got {keep}")
    x = np.asarray(x)
    if not train or keep == 1.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    _nonempty(z, "softmax")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: non-finite input")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def cross_entropy(p, label):
    """Negative log-probability of `label`, averaged when p is a batch."""
    p = np.asarray(p, dtype=np.float64)
    _nonempty(p, "cross_entropy")
    label = np.asarray(label)
    K = p.shape[-1]
    if np.any(label < 0) or np.any(label >= K):
        raise IndexError(f"label out of range [0, {K})")
    picked = np.take_along_axis(p.reshape(-1, K), label.reshape(-1, 1), axis=1)
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def cross_entropy_backward(p, label):
    p = np.asarray(p, dtype=np.float64)
    flat = p.reshape(-1, p.shape[-1])
    lab = np.asarray(label).reshape(-1)
    n = flat.shape[0]
    dp = np.zeros_like(flat)
    picked = flat[np.arange(n), lab]
    # the clamp has zero slope below the floor
    dp[np.arange(n), lab] = np.where(picked > PROB_FLOOR, -1.0 / np.maximum(picked, PROB_FLOOR), 0.0) / n
    return dp.reshape(p.shape)


# ------------------------------------------------------------------ tape

class Var:
    """A value flowing through a `GradTape`, with an accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = value
        self.grad = None

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g


class GradTape:
    """Records primitive operations so their gradients can be replayed.

    With ``record=False`` the tape only evaluates; nothing is stored.
    """

    def __init__(self, record=True):
        self.record = record
        self.ops: list[tuple[str, Callable[[], None]]] = []

    def leaf(self, value) -> Var:
        return Var(value)

    def _push(self, name, fn):
        if self.record:
            self.ops.append((name, fn))

    def backward(self, out: Var, seed=1.0):
        out.grad = np.asarray(seed, dtype=np.float64) * np.ones_like(np.asarray(out.value, dtype=np.float64))
        for _, fn in reversed(self.ops):
            fn()

    # -- recorded primitives

    def gather(self, table: Var, idx: np.ndarray) -> Var:
        out = Var(table.value[idx])

        def back():
            if out.grad is None:
                return
            g = np.zeros_like(table.value)
            np.add.at(g, idx.reshape(-1), out.grad.reshape(-1, table.value.shape[1]))
            table._accumulate(g)

        self._push("gather", back)
        return out

    def transpose_last(self, x: Var) -> Var:
        out = Var(np.swapaxes(x.value, -1, -2))

        def back():
            if out.grad is not None:
                x._accumulate(np.swapaxes(out.grad, -1, -2))

        self._push("transpose", back)
        return out

    def conv(self, X: Var, filters: Var, bias: Var) -> Var:
        out = Var(temporal_convolution(X.value, filters.value, bias.value))

        def back():
            if out.grad is None:
                return
            dX, dF, db = temporal_convolution_backward(out.grad, X.value, filters.value)
            X._accumulate(dX)
            filters._accumulate(dF)
            bias._accumulate(db)

        self._push("conv", back)
        return out

    def relu(self, x: Var) -> Var:
        out = Var(relu(x.value))

        def back():
            if out.grad is not None:
                x._accumulate(relu_backward(out.grad, x.value))

        self._push("relu", back)
        return out

    def max_over_time(self, fm: Var) -> Var:
        vals, idx = max_over_time(fm.value)
        out = Var(vals)

        def back():
            if out.grad is not None:
                fm._accumulate(max_over_time_backward(out.grad, idx, fm.value.shape[-1]))

        self._push("max_over_time", back)
        return out

    def concat(self, parts: list[Var]) -> Var:
        sizes = [p.value.shape[-1] for p in parts]
        out = Var(np.concatenate([p.value for p in parts], axis=-1))

        def back():
            if out.grad is None:
                return
            start = 0
            for p, s in zip(parts, sizes):
                p._accumulate(out.grad[..., start:start + s])
                start += s

        self._push("concat", back)
        return out

    def dropout(self, x: Var, keep, rng, train) -> Var:
        y, mask = dropout(x.value, keep, rng, train)
        out = Var(y)

        def back():
            if out.grad is not None:
                x._accumulate(out.grad if mask is None else out.grad * mask)

        self._push("dropout", back)
        return out

    def affine(self, x: Var, W: Var, b: Var) -> Var:
        out = Var(affine(x.value, W.value, b.value))

        def back():
            if out.grad is None:
                return
            dx, dW, db = affine_backward(out.grad, x.value, W.value)
            x._accumulate(dx)
            W._accumulate(dW)
            b._accumulate(db)

        self._push("affine", back)
        return out

    def matvec(self, M: Var, v: Var) -> Var:
        """M @ v for a vector v, or row-wise for a batch (B, K)."""
        out = Var(v.value @ M.value.T)

        def back():
            if out.grad is None:
                return
            g = out.grad
            M._accumulate(np.outer(g, v.value) if g.ndim == 1 else g.T @ v.value)
            v._accumulate(g @ M.value)

        self._push("matvec", back)
        return out

    def softmax(self, z: Var) -> Var:
        out = Var(softmax(z.value))

        def back():
            if out.grad is not None:
                z._accumulate(softmax_backward(out.grad, out.value))

        self._push("softmax", back)
        return out

    def cross_entropy(self, p: Var, labels) -> Var:
        out = Var(cross_entropy(p.value, labels))

        def back():
            if out.grad is not None:
                p._accumulate(float(out.grad) * cross_entropy_backward(p.value, labels))

        self._push("cross_entropy", back)
        return out

    def half_sq_norm(self, M: Var, scale: float) -> Var:
        """scale/2 * ||M||_F^2."""
        out = Var(0.5 * scale * float(np.sum(M.value ** 2)))

        def back():
            if out.grad is not None:
                M._accumulate(float(out.grad) * scale * M.value)

        self._push("half_sq_norm", back)
        return out

    def add(self, a: Var, b: Var) -> Var:
        out = Var(a.value + b.value)

        def back():
            if out.grad is not None:
                a._accumulate(out.grad)
                b._accumulate(out.grad)

        self._push("add", back)
        return out


# ------------------------------------------------------------ grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    # (block name, flat index, analytic, numeric, rel error)
    entries: list[tuple[str, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(a: float, n: float, floor: float = 1e-7) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(f, params, grads, step=1e-4, tol=1e-3, coords=None, floor=1e-7):
    """Compare analytic gradients against central differences.

    `f` maps the parameter dict to a scalar and must be deterministic.
    `params` and `grads` are dicts of arrays keyed alike. `coords` optionally
    maps a block name to the flat indices to probe; by default every entry
    is checked. Parameters are perturbed in place and restored.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    report = GradCheckReport(0.0, tol, 0)
    for name, value in params.items():
        flat = value.reshape(-1)
        idxs = range(flat.size) if coords is None else coords.get(name, ())
        g = np.asarray(grads[name]).reshape(-1)
        for i in idxs:
            old = flat[i]
            flat[i] = old + step
            fp = f(params)
            flat[i] = old - step
            fm = f(params)
            flat[i] = old
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective at {name}[{i}]")
            num = (fp - fm) / (2 * step)
            err = relative_error(float(g[i]), num, floor)
            report.entries.append((name, int(i), float(g[i]), num, err))
            report.max_rel_error = max(report.max_rel_error, err)
            report.checked += 1
    return report
