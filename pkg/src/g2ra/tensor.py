"""Dense token matrices with hand-written reverse-mode rules.

Every forward op optionally records a backward closure on a :class:`Tape`.
``Tape.backward`` replays those closures in reverse, so gradients flow into
the ``grad`` buffers of leaf matrices (parameters and inputs) and accumulate
across calls. There is no general expression graph: each op owns its rule.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class OracleFailure(RuntimeError):
    """Raised when the finite-difference oracle sees a non-finite value."""


def _float_dtype(x) -> type:
    """float64 unless the input is already extended precision (used by the oracle)."""
    return np.longdouble if np.asarray(x).dtype == np.longdouble else np.float64


@dataclass(eq=False)
class TokenMatrix:
    """A rows x cols float64 (or extended-precision) array with an optional gradient buffer."""

    data: np.ndarray
    grad: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=_float_dtype(self.data))
        if data.ndim == 0:
            data = data.reshape(1, 1)
        elif data.ndim == 1:
            data = data.reshape(1, -1)
        if data.ndim != 2:
            raise DimensionError(f"token matrix must be 2-D, got shape {data.shape}")
        self.data = data
        if self.grad is not None and self.grad.shape != data.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} does not match data shape {data.shape}"
            )

    @property
    def shape(self):
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        label = f"{self.name} " if self.name else ""
        return f"TokenMatrix({label}{self.rows}x{self.cols})"


class ParamTensor(TokenMatrix):
    """A named learnable matrix (or 1x1 scalar) whose grad accumulates."""

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=_float_dtype(value)), None, name)
        self.zero_grad()

    @property
    def value(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data[0, 0])


class Tape:
    """Forward trace: an ordered list of backward rules plus the nodes they produced."""

    def __init__(self):
        self._rules: List[Callable[[], None]] = []
        self._produced: List[TokenMatrix] = []

    def record(self, out: TokenMatrix, rule: Callable[[], None]):
        self._produced.append(out)
        self._rules.append(rule)

    def __len__(self):
        return len(self._rules)

    def backward(self, out: TokenMatrix, upstream):
        self.backward_many([(out, upstream)])

    def backward_many(self, seeds):
        """Seed several output nodes with upstream gradients and replay the tape once."""
        for node in self._produced:
            node.grad = None
        for out, upstream in seeds:
            g = np.asarray(upstream, dtype=np.float64).reshape(out.shape)
            out.accumulate(g)
        for rule in reversed(self._rules):
            rule()


def _check_same(a: TokenMatrix, b: TokenMatrix, op: str):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _broadcast_kind(a: TokenMatrix, b: TokenMatrix, op: str) -> bool:
    """True when b is a 1 x cols row broadcast over a's rows."""
    if a.shape == b.shape:
        return False
    if b.rows == 1 and b.cols == a.cols:
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------


def matmul(a: TokenMatrix, b: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    out = TokenMatrix(a.data @ b.data)
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            a.accumulate(g @ b.data.T)
            b.accumulate(a.data.T @ g)
        tape.record(out, rule)
    return out


def matmul_nt(a: TokenMatrix, b: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    """a @ b.T, used for query-key scores."""
    if a.cols != b.cols:
        raise DimensionError(f"matmul_nt: {a.shape} x {b.shape}^T")
    out = TokenMatrix(a.data @ b.data.T)
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            a.accumulate(g @ b.data)
            b.accumulate(g.T @ a.data)
        tape.record(out, rule)
    return out


def row_softmax(m: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = TokenMatrix(e / e.sum(axis=1, keepdims=True))
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            s = out.data
            m.accumulate(s * (g - (g * s).sum(axis=1, keepdims=True)))
        tape.record(out, rule)
    return out


def mean_pool_rows(m: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    if m.rows < 1:
        raise ValueError("mean_pool_rows: empty input (zero rows)")
    out = TokenMatrix(m.data.mean(axis=0, keepdims=True))
    if tape is not None:
        n = m.rows
        def rule():
            g = out.grad
            if g is None:
                return
            m.accumulate(np.repeat(g / n, n, axis=0))
        tape.record(out, rule)
    return out


def add(a: TokenMatrix, b: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    bcast = _broadcast_kind(a, b, "add")
    out = TokenMatrix(a.data + b.data)
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            a.accumulate(g)
            b.accumulate(g.sum(axis=0, keepdims=True) if bcast else g)
        tape.record(out, rule)
    return out


def multiply(a: TokenMatrix, b: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    bcast = _broadcast_kind(a, b, "multiply")
    out = TokenMatrix(a.data * b.data)
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            a.accumulate(g * b.data)
            gb = g * a.data
            b.accumulate(gb.sum(axis=0, keepdims=True) if bcast else gb)
        tape.record(out, rule)
    return out


def sigmoid(m: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    x = m.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = TokenMatrix(np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)))
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            s = out.data
            m.accumulate(g * s * (1.0 - s))
        tape.record(out, rule)
    return out


def relu(m: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    mask = m.data > 0
    out = TokenMatrix(np.where(mask, m.data, 0.0))
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            m.accumulate(g * mask)
        tape.record(out, rule)
    return out


_ELEMENTWISE = {"sigmoid": sigmoid, "relu": relu, "rectified-linear": relu,
                "multiply": multiply, "add": add}


def elementwise(kind: str, *args, tape: Optional[Tape] = None) -> TokenMatrix:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args, tape=tape)


def scale(m: TokenMatrix, s: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    """m * s for a 1x1 scalar s."""
    if s.shape != (1, 1):
        raise DimensionError(f"scale: scalar must be 1x1, got {s.shape}")
    out = TokenMatrix(m.data * s.data[0, 0])
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            m.accumulate(g * s.data[0, 0])
            s.accumulate(np.array([[np.sum(g * m.data)]]))
        tape.record(out, rule)
    return out


def lerp(a: TokenMatrix, b: TokenMatrix, w: TokenMatrix, tape: Optional[Tape] = None) -> TokenMatrix:
    """w * a + (1 - w) * b for a 1x1 weight w."""
    _check_same(a, b, "lerp")
    if w.shape != (1, 1):
        raise DimensionError(f"lerp: weight must be 1x1, got {w.shape}")
    wv = w.data[0, 0]
    out = TokenMatrix(wv * a.data + (1.0 - wv) * b.data)
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            a.accumulate(g * wv)
            b.accumulate(g * (1.0 - wv))
            w.accumulate(np.array([[np.sum(g * (a.data - b.data))]]))
        tape.record(out, rule)
    return out


def hconcat(parts: Sequence[TokenMatrix], tape: Optional[Tape] = None) -> TokenMatrix:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"hconcat: row counts differ {[p.shape for p in parts]}")
    out = TokenMatrix(np.concatenate([p.data for p in parts], axis=1))
    if tape is not None:
        edges = np.cumsum([0] + [p.cols for p in parts])
        def rule():
            g = out.grad
            if g is None:
                return
            for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
                p.accumulate(g[:, lo:hi])
        tape.record(out, rule)
    return out


def split_cols(m: TokenMatrix, at: int, tape: Optional[Tape] = None):
    """Split columns into [:at] and [at:]."""
    if not 0 < at < m.cols:
        raise DimensionError(f"split_cols: cannot split {m.shape} at {at}")
    left = TokenMatrix(m.data[:, :at].copy())
    right = TokenMatrix(m.data[:, at:].copy())
    if tape is not None:
        def rule_left():
            if left.grad is not None:
                g = np.zeros_like(m.data)
                g[:, :at] = left.grad
                m.accumulate(g)
        def rule_right():
            if right.grad is not None:
                g = np.zeros_like(m.data)
                g[:, at:] = right.grad
                m.accumulate(g)
        tape.record(left, rule_left)
        tape.record(right, rule_right)
    return left, right


def broadcast_rows(row: TokenMatrix, n: int, tape: Optional[Tape] = None) -> TokenMatrix:
    if row.rows != 1:
        raise DimensionError(f"broadcast_rows: expected a 1 x cols row, got {row.shape}")
    out = TokenMatrix(np.repeat(row.data, n, axis=0))
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            row.accumulate(g.sum(axis=0, keepdims=True))
        tape.record(out, rule)
    return out


def norm_squash(m: TokenMatrix, limit: float, tape: Optional[Tape] = None) -> TokenMatrix:
    """limit * r / sqrt(1 + |r|^2) per row; output row norms stay below ``limit``."""
    r = m.data
    denom = np.sqrt(1.0 + (r * r).sum(axis=1, keepdims=True))
    out = TokenMatrix(limit * r / denom)
    if tape is not None:
        def rule():
            g = out.grad
            if g is None:
                return
            # d/dr [r / s] with s = sqrt(1+|r|^2): (g - r (r.g)/s^2) / s
            rg = (r * g).sum(axis=1, keepdims=True)
            m.accumulate(limit * (g - r * rg / denom**2) / denom)
        tape.record(out, rule)
    return out


def constant(value) -> TokenMatrix:
    return TokenMatrix(np.array(value, dtype=np.float64))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_gradient(
    f: Callable[[], float],
    params: Iterable[TokenMatrix],
    h: float = 1e-5,
) -> Dict[str, np.ndarray]:
    """Central-difference gradient of a scalar closure, keyed by parameter name.

    ``f`` is re-evaluated with each parameter entry perturbed in place; the
    entry is restored before moving on.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    out = {}
    for p in params:
        est = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            fp = f()
            p.data[idx] = orig - h
            fm = f()
            p.data[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleFailure(f"non-finite objective while perturbing {p.name}{list(idx)}")
            est[idx] = (fp - fm) / (2.0 * h)
        out[p.name] = est
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def max_relative_errors(
    analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray]
) -> Dict[str, float]:
    return {k: float(relative_error(analytic[k], numeric[k]).max()) for k in numeric}
