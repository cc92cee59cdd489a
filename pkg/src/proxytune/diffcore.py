"""Small dense-tensor layer with a reverse-mode tape.

Tensors wrap read-only float64 numpy arrays. A :class:`Tape` records every
primitive whose inputs include a watched leaf (or a value derived from one);
everything else is evaluated eagerly and contributes a constant. Forward
values are computed by the same numpy expression whether or not a tape is
involved, so tracking never changes results.

    tape = Tape()
    w = tape.watch(Tensor(np.ones((3, 2))))
    loss = cross_entropy(matmul(x, w), y)
    grads = tape.backward(loss)        # {id(w): dL/dw}
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeMismatch", "NonFinite", "IndexOutOfRange",
    "DetachedLoss", "ZeroNorm",
    "matmul", "add", "sub", "mul_scalar", "add_const", "add_bias", "tanh",
    "relu", "l2_normalize_rows", "clip_unit", "sum_all", "square", "softmax",
    "log_softmax", "cross_entropy", "numerical_grad", "grad_rel_error",
]


class ShapeMismatch(ValueError):
    pass


class NonFinite(ArithmeticError):
    pass


class IndexOutOfRange(IndexError):
    pass


class DetachedLoss(RuntimeError):
    pass


class ZeroNorm(ArithmeticError):
    pass


class Tensor:
    """Immutable float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        arr = np.array(data, dtype=np.float64)  # always a private copy
        if arr.ndim == 0 or 0 in arr.shape:
            raise ShapeMismatch(f"tensor needs positive dimensions, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "Tape | None") -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"


def _scalar_err(t: Tensor):
    raise ShapeMismatch(f"item() needs a single element, got shape {t.shape}")


class Tape:
    """Single-writer record of primitive operations.

    Nodes are stored in forward order; :meth:`backward` walks them in exact
    reverse. Gradients are keyed by ``id()`` of the watched leaf tensors.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._leaves: dict[int, Tensor] = {}
        self._produced: set[int] = set()

    def watch(self, t: Tensor | np.ndarray) -> Tensor:
        if not isinstance(t, Tensor):
            t = Tensor(t)
        leaf = Tensor._wrap(t.data, self)
        self._leaves[id(leaf)] = leaf
        return leaf

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append((out, inputs, vjp))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar ``loss`` w.r.t. every watched leaf.

        Leaves that did not participate get exact zeros.
        """
        if loss.tape is not self or id(loss) not in self._produced:
            raise DetachedLoss("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeMismatch(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if inp.tape is not self or gi is None:
                    continue
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
        return {k: grads.get(k, np.zeros_like(leaf.data)) for k, leaf in self._leaves.items()}


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*ts: Tensor) -> "Tape | None":
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise RuntimeError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    out = Tensor._wrap(arr, tape)
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what}: non-finite values")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} x {b.shape}")
    A, B = np.ascontiguousarray(a.data), np.ascontiguousarray(b.data)
    # einsum keeps each output row independent of the other rows in the batch,
    # so per-batch and whole-dataset evaluation agree bitwise (BLAS does not);
    # its result also depends on memory layout, hence the contiguous copies
    return _emit(np.einsum("ik,kj->ij", A, B), (a, b), lambda g: (g @ B.T, A.T @ g))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add {a.shape} + {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"sub {a.shape} - {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul_scalar(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_const(a, const: np.ndarray) -> Tensor:
    """``a + const`` where ``const`` is an untracked array of the same shape."""
    a = _as_tensor(a)
    const = np.asarray(const, dtype=np.float64)
    if const.shape != a.shape:
        raise ShapeMismatch(f"add_const {a.shape} + {const.shape}")
    return _emit(a.data + const, (a,), lambda g: (g,))


def add_bias(a, b) -> Tensor:
    """Row-wise bias: ``a[N, k] + b[k]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"add_bias {a.shape} + {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (np.where(mask, g, 0.0),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _emit(x * x, (a,), lambda g: (2.0 * x * g,))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def l2_normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Divide each row by its L2 norm; raises ZeroNorm below ``eps``."""
    a = _as_tensor(a)
    x = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(norms < eps):
        raise ZeroNorm("row with L2 norm below 1e-12")
    u = x / norms

    def vjp(g):
        g2 = g.reshape(u.shape)
        gx = (g2 - u * np.sum(g2 * u, axis=1, keepdims=True)) / norms
        return (gx.reshape(a.shape),)

    return _emit(u.reshape(a.shape), (a,), vjp)


def _log_softmax_arr(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _softmax_arr(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def clip_unit(a) -> Tensor:
    """Clamp to [-1, 1]; gradient passes straight through.

    Only used to absorb last-ulp overshoot of cosine similarities.
    """
    a = _as_tensor(a)
    return _emit(np.clip(a.data, -1.0, 1.0), (a,), lambda g: (g,))


def softmax(z) -> np.ndarray | Tensor:
    """Stable softmax over the last axis.

    Plain arrays in, plain array out; a Tensor in gives a Tensor out.
    """
    raw = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if raw.shape[-1] < 2:
        raise ShapeMismatch("softmax needs at least 2 classes")
    _check_finite(raw, "softmax")
    p = _softmax_arr(raw)
    if not isinstance(z, Tensor):
        return p
    return _emit(p, (z,), lambda g: (p * (g - np.sum(g * p, axis=-1, keepdims=True)),))


def log_softmax(z) -> np.ndarray | Tensor:
    raw = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    _check_finite(raw, "log_softmax")
    ls = _log_softmax_arr(raw)
    if not isinstance(z, Tensor):
        return ls
    p = np.exp(ls)
    return _emit(ls, (z,), lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),))


def cross_entropy(logits, y) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Accepts a single logit vector with an int label, or an ``[N, C]`` batch
    with ``N`` labels. Uses log-sum-exp, never log(softmax).
    """
    z = _as_tensor(logits)
    single = z.data.ndim == 1
    Z = z.data.reshape(1, -1) if single else z.data
    labels = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexOutOfRange(f"labels must be integers, got {labels.dtype}")
    n, C = Z.shape
    if C < 2:
        raise ShapeMismatch("cross_entropy needs at least 2 classes")
    if labels.shape != (n,):
        raise ShapeMismatch(f"{labels.shape[0]} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexOutOfRange(f"label outside [0, {C})")
    _check_finite(Z, "cross_entropy")
    ls = _log_softmax_arr(Z)
    rows = np.arange(n)
    loss = -np.sum(ls[rows, labels]) / n

    def vjp(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        d *= g[0] / n
        return (d.reshape(z.shape),)

    return _emit(np.array([loss]), (z,), vjp)


def numerical_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, element by element."""
    x = np.array(x, dtype=np.float64, order="C")  # reshape(-1) must be a view
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

