"""Minimal reverse-mode differentiation on 2-D float64 arrays.

A :class:`Tape` records every primitive executed on :class:`Var` nodes.
``tape.backward(loss)`` walks the record in reverse and accumulates
gradients into the :class:`Parameter` objects that were lifted onto the
tape with :meth:`Tape.param`.

    tape = Tape()
    w = tape.param(params["w"])
    loss = sum_all(relu(x @ w))
    tape.backward(loss)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, TapeStateError

DTYPE = np.float64


def as_matrix(x) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class Parameter:
    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value) -> None:
        self.name = name
        self.value = as_matrix(value).copy()
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ModelParams:
    """Ordered, name-unique store of :class:`Parameter` objects."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}
        self._by_prefix: dict[str, list[Parameter]] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        self._by_prefix.clear()
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def with_prefix(self, prefix: str) -> list[Parameter]:
        hit = self._by_prefix.get(prefix)
        if hit is None:
            hit = self._by_prefix[prefix] = [p for n, p in self._params.items() if n.startswith(prefix)]
        return list(hit)

    def num_entries(self, prefix: str = "") -> int:
        return sum(p.value.size for p in self.with_prefix(prefix))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for p in self:
            q = out.add(p.name, p.value)
            q.grad = p.grad.copy()
        return out


class Var:
    """A node on a tape: an immutable value plus its accumulated gradient."""

    __slots__ = ("value", "grad", "tape", "_backward", "_parents", "param")

    def __init__(self, value: np.ndarray, tape: "Tape", parents=(), backward=None, param=None):
        self.value = value
        self.grad: np.ndarray | None = None
        self.tape = tape
        self._parents = parents
        self._backward = backward
        self.param = param

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() on non-scalar of shape {self.value.shape}")
        return float(self.value[0, 0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Var":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


class Tape:
    """Ordered record of executed primitives.

    A tape supports exactly one ``backward`` call; build a fresh tape for
    each forward pass.
    """

    def __init__(self) -> None:
        self.nodes: list[Var] = []
        self._leaves: dict[str, Var] = {}
        self._consumed = False

    def const(self, value) -> Var:
        return Var(as_matrix(value), self)

    def param(self, p: Parameter) -> Var:
        leaf = self._leaves.get(p.name)
        if leaf is None or leaf.param is not p:
            leaf = Var(p.value, self, param=p)
            self._leaves[p.name] = leaf
        return leaf

    def record(self, value: np.ndarray, parents: tuple, backward: Callable, op: str) -> Var:
        """Register a primitive's output. ``backward(g)`` must return one
        gradient (or None) per parent, in order."""
        # a finite sum implies finite entries; scan only when it is not
        if not math.isfinite(value.sum()) and not np.isfinite(value).all():
            raise NumericalError(f"non-finite output from primitive {op!r}")
        out = Var(value, self, parents, backward)
        self.nodes.append(out)
        return out

    def backward(self, loss: Var) -> None:
        if loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        if self._consumed:
            raise TapeStateError("backward already ran on this tape; build a new tape")
        self._consumed = True
        loss.grad = np.ones((1, 1), dtype=DTYPE)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for leaf in self._leaves.values():
            if leaf.grad is not None:
                leaf.param.grad += leaf.grad


def _lift(x, tape: Tape) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


# --- primitives -----------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: {a.value.shape} x {b.value.shape} (inner dims differ)")
    av, bv = a.value, b.value

    def back(g):
        return g @ bv.T, av.T @ g

    return a.tape.record(av @ bv, (a, b), back, "matmul")


def add(a: Var, b) -> Var:
    b = _lift(b, a.tape)
    _check_broadcast(a.value, b.value, "add")
    sa, sb = a.value.shape, b.value.shape

    def back(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return a.tape.record(a.value + b.value, (a, b), back, "add")


def sub(a: Var, b) -> Var:
    b = _lift(b, a.tape)
    _check_broadcast(a.value, b.value, "sub")
    sa, sb = a.value.shape, b.value.shape

    def back(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return a.tape.record(a.value - b.value, (a, b), back, "sub")


def mul(a: Var, b) -> Var:
    """Elementwise product with row/column broadcasting."""
    b = _lift(b, a.tape)
    _check_broadcast(a.value, b.value, "mul")
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return a.tape.record(av * bv, (a, b), back, "mul")


def scale(a: Var, c: float) -> Var:
    def back(g):
        return (g * c,)

    return a.tape.record(a.value * c, (a,), back, "scale")


def transpose(a: Var) -> Var:
    def back(g):
        return (g.T,)

    return a.tape.record(a.value.T.copy(), (a,), back, "transpose")


def relu(x: Var) -> Var:
    mask = x.value > 0.0

    def back(g):
        return (g * mask,)

    return x.tape.record(np.where(mask, x.value, 0.0), (x,), back, "relu")


def _softmax(v: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cols(x: Var) -> Var:
    """Softmax down each column (every column sums to one)."""
    if x.value.shape[0] < 1:
        raise DimensionError("softmax_cols needs at least one row")
    y = _softmax(x.value, 0)

    def back(g):
        return (y * (g - (g * y).sum(axis=0, keepdims=True)),)

    return x.tape.record(y, (x,), back, "softmax_cols")


def softmax_rows(x: Var) -> Var:
    y = _softmax(x.value, 1)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return x.tape.record(y, (x,), back, "softmax_rows")


def log_softmax_rows(x: Var) -> Var:
    v = x.value
    shifted = v - v.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def back(g):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)

    return x.tape.record(y, (x,), back, "log_softmax_rows")


def layer_norm_rows(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalise each row to zero mean / unit population variance, then
    apply the affine ``gamma * x_hat + beta``."""
    d = x.value.shape[1]
    if gamma.value.shape != (1, d) or beta.value.shape != (1, d):
        raise DimensionError(
            f"layer_norm_rows: x {x.value.shape}, gamma {gamma.value.shape}, beta {beta.value.shape}"
        )
    if eps <= 0:
        raise ContractError("layer_norm_rows: eps must be positive")
    mu = x.value.mean(axis=1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value

    def back(g):
        dxhat = g * gv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return x.tape.record(xhat * gv + beta.value, (x, gamma, beta), back, "layer_norm_rows")


def sum_all(x: Var) -> Var:
    shape = x.value.shape

    def back(g):
        return (np.full(shape, g[0, 0]),)

    return x.tape.record(np.array([[x.value.sum()]]), (x,), back, "sum_all")


def mean_all(x: Var) -> Var:
    shape = x.value.shape
    n = x.value.size

    def back(g):
        return (np.full(shape, g[0, 0] / n),)

    return x.tape.record(np.array([[x.value.sum() / n]]), (x,), back, "mean_all")


def slice_cols(x: Var, start: int, stop: int) -> Var:
    shape = x.value.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return x.tape.record(x.value[:, start:stop].copy(), (x,), back, "slice_cols")


def slice_rows(x: Var, start: int, stop: int) -> Var:
    shape = x.value.shape

    def back(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return x.tape.record(x.value[start:stop].copy(), (x,), back, "slice_rows")


def concat_cols(xs: list[Var]) -> Var:
    widths = [x.value.shape[1] for x in xs]
    edges = np.cumsum([0] + widths)

    def back(g):
        return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(xs)))

    return xs[0].tape.record(np.concatenate([x.value for x in xs], axis=1), tuple(xs), back, "concat_cols")


def concat_rows(xs: list[Var]) -> Var:
    heights = [x.value.shape[0] for x in xs]
    edges = np.cumsum([0] + heights)

    def back(g):
        return tuple(g[edges[i] : edges[i + 1]] for i in range(len(xs)))

    return xs[0].tape.record(np.concatenate([x.value for x in xs], axis=0), tuple(xs), back, "concat_rows")


def gather_rows(table: Var, ids) -> Var:
    """Row lookup ``table[ids]`` (embedding)."""
    ids = np.asarray(ids, dtype=np.int64)
    n_rows = table.value.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        raise ContractError(f"gather_rows: id out of range [0, {n_rows})")
    shape = table.value.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return table.tape.record(table.value[ids], (table,), back, "gather_rows")


def pick(x: Var, cols) -> Var:
    """Select ``x[i, cols[i]]`` for every row; returns an n x 1 column."""
    cols = np.asarray(cols, dtype=np.int64)
    n, v = x.value.shape
    if cols.shape != (n,):
        raise DimensionError(f"pick: {n} rows but {cols.shape[0]} column indices")
    if n and (cols.min() < 0 or cols.max() >= v):
        raise ContractError(f"pick: index out of range [0, {v})")
    rows = np.arange(n)

    def back(g):
        out = np.zeros((n, v))
        out[rows, cols] = g[:, 0]
        return (out,)

    return x.tape.record(x.value[rows, cols].reshape(n, 1), (x,), back, "pick")


def mean_over(xs: list[Var]) -> Var:
    """Elementwise arithmetic mean of equally shaped nodes."""
    if not xs:
        raise ContractError("mean_over needs at least one input")
    total = xs[0]
    for x in xs[1:]:
        total = add(total, x)
    return scale(total, 1.0 / len(xs))


# --- gradient verification --------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, int]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self, tol: float) -> list[GradCheckEntry]:
        return [e for e in self.entries if not e.max_rel_error < tol]


def rel_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    loss_fn: Callable[[ModelParams], Var],
    params: ModelParams,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients with central differences for every entry of
    every parameter (or only those in ``names``).

    ``loss_fn`` must build its graph on a fresh tape each call and return
    the scalar loss node.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: h must be positive")
    report = GradCheckReport()
    params.zero_grad()
    loss = loss_fn(params)
    loss.tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}
    selected = None if names is None else set(names)

    for p in params:
        if selected is not None and p.name not in selected:
            continue
        worst = GradCheckEntry(p.name, 0.0, (0, 0), 0.0, 0.0)
        flat = p.value.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            try:
                f_plus = _probe(loss_fn, params, p.name)
                flat[k] = orig - h
                f_minus = _probe(loss_fn, params, p.name)
            finally:
                flat[k] = orig
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[p.name].reshape(-1)[k])
            err = rel_error(a, numeric)
            if err > worst.max_rel_error or k == 0:
                worst = GradCheckEntry(p.name, err, np.unravel_index(k, p.value.shape), a, numeric)
        if flat.size:
            worst.worst_index = tuple(int(i) for i in worst.worst_index)
            report.entries.append(worst)
    return report


def _probe(loss_fn, params: ModelParams, name: str) -> float:
    try:
        val = loss_fn(params).item()
    except NumericalError as exc:
        raise NumericalError(f"non-finite loss while probing {name!r}: {exc}") from exc
    if not np.isfinite(val):
        raise NumericalError(f"non-finite loss while probing {name!r}")
    return val
