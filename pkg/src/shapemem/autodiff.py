"""Dense float64 arrays with reverse-mode automatic differentiation.

A ``Tape`` records every tensor created on it in construction order. Since an
operation's inputs always exist before its output, that order is topological,
and ``Tape.backward`` is a single deterministic reverse sweep. Tensors are
immutable once built; a tape belongs to one owner and is not shared across
threads (run independent samples on independent tapes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, EvaluationError


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """One node on a tape: a float64 ndarray plus gradient plumbing."""

    __slots__ = ("tape", "id", "data", "_parents", "_grad_fn")

    def __init__(self, tape: "Tape", data: np.ndarray, parents=(), grad_fn=None):
        self.tape = tape
        self.data = data
        self._parents = parents
        self._grad_fn = grad_fn
        self.id = tape._register(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        return self.tape.gradients.get(self.id)

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

    # -- arithmetic ------------------------------------------------------

    def _coerce(self, other):
        """Return (array, tensor_or_None) for the right operand."""
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ContractError("operands live on different tapes")
            return other.data, other
        return _as_array(other), None

    def __add__(self, other):
        bdata, bt = self._coerce(other)
        out_data = self.data + bdata

        def grad_fn(g):
            pairs = [(self, _unbroadcast(g, self.data.shape))]
            if bt is not None:
                pairs.append((bt, _unbroadcast(g, bt.data.shape)))
            return pairs

        return Tensor(self.tape, out_data, (self,) if bt is None else (self, bt), grad_fn)

    def __radd__(self, other):
        return self.__add__(other)

    def __sub__(self, other):
        bdata, bt = self._coerce(other)
        out_data = self.data - bdata

        def grad_fn(g):
            pairs = [(self, _unbroadcast(g, self.data.shape))]
            if bt is not None:
                pairs.append((bt, _unbroadcast(-g, bt.data.shape)))
            return pairs

        return Tensor(self.tape, out_data, (self,) if bt is None else (self, bt), grad_fn)

    def __rsub__(self, other):
        return self.__neg__().__add__(other)

    def __mul__(self, other):
        bdata, bt = self._coerce(other)
        out_data = self.data * bdata
        adata = self.data

        def grad_fn(g):
            pairs = [(self, _unbroadcast(g * bdata, adata.shape))]
            if bt is not None:
                pairs.append((bt, _unbroadcast(g * adata, bt.data.shape)))
            return pairs

        return Tensor(self.tape, out_data, (self,) if bt is None else (self, bt), grad_fn)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        bdata, bt = self._coerce(other)
        zeros = np.argwhere(bdata == 0.0)
        if zeros.size:
            raise DomainError(f"division by zero at index {tuple(int(i) for i in zeros[0])}")
        out_data = self.data / bdata
        adata = self.data

        def grad_fn(g):
            pairs = [(self, _unbroadcast(g / bdata, adata.shape))]
            if bt is not None:
                pairs.append((bt, _unbroadcast(-g * adata / (bdata * bdata), bt.data.shape)))
            return pairs

        return Tensor(self.tape, out_data, (self,) if bt is None else (self, bt), grad_fn)

    def __neg__(self):
        return Tensor(self.tape, -self.data, (self,), lambda g: [(self, -g)])

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise ContractError("pow exponent must be a Python number")
        if exponent != int(exponent) and np.any(self.data < 0):
            idx = np.argwhere(self.data < 0)[0]
            raise DomainError(f"fractional power of negative value at index {tuple(int(i) for i in idx)}")
        out_data = self.data ** exponent
        base = self.data

        def grad_fn(g):
            return [(self, g * exponent * base ** (exponent - 1))]

        return Tensor(self.tape, out_data, (self,), grad_fn)

    def __matmul__(self, other):
        bdata, bt = self._coerce(other)
        if self.data.ndim != 2 or bdata.ndim != 2:
            raise ContractError("matmul expects two rank-2 arrays")
        if self.data.shape[1] != bdata.shape[0]:
            raise ContractError(
                f"matmul inner extents differ: {self.data.shape} x {bdata.shape}"
            )
        out_data = self.data @ bdata
        adata = self.data

        def grad_fn(g):
            pairs = [(self, g @ bdata.T)]
            if bt is not None:
                pairs.append((bt, adata.T @ g))
            return pairs

        return Tensor(self.tape, out_data, (self,) if bt is None else (self, bt), grad_fn)

    # -- unary -----------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(self.tape, out_data, (self,), lambda g: [(self, g * out_data)])

    def log(self):
        bad = np.argwhere(self.data <= 0.0)
        if bad.size:
            raise DomainError(f"log of non-positive value at index {tuple(int(i) for i in bad[0])}")
        data = self.data
        return Tensor(self.tape, np.log(data), (self,), lambda g: [(self, g / data)])

    def relu(self):
        # subgradient at exactly 0 is 0
        mask = self.data > 0.0
        return Tensor(self.tape, np.where(mask, self.data, 0.0), (self,),
                      lambda g: [(self, g * mask)])

    def abs(self):
        # subgradient at exactly 0 is 0, matching relu's convention
        sign = np.sign(self.data)
        return Tensor(self.tape, np.abs(self.data), (self,), lambda g: [(self, g * sign)])

    # -- reductions ------------------------------------------------------

    def _check_axis(self, axis):
        if axis is None:
            if self.data.size == 0:
                raise ContractError("reduction over an empty array")
            return
        if not -self.data.ndim <= axis < self.data.ndim:
            raise ContractError(f"axis {axis} invalid for shape {self.shape}")
        if self.data.shape[axis] == 0:
            raise ContractError(f"reduction over empty axis {axis}")

    def sum(self, axis=None, keepdims=False):
        self._check_axis(axis)
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape

        def grad_fn(g):
            if axis is None:
                return [(self, np.broadcast_to(g, shape).copy())]
            ge = g if keepdims else np.expand_dims(g, axis)
            return [(self, np.broadcast_to(ge, shape).copy())]

        return Tensor(self.tape, out_data, (self,), grad_fn)

    def mean(self, axis=None, keepdims=False):
        self._check_axis(axis)
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis=None, keepdims=False):
        """Max reduction; backward routes the gradient to the first argmax."""
        self._check_axis(axis)
        data = self.data
        if axis is None:
            out_data = data.max()
            flat_idx = int(data.argmax())

            def grad_fn(g):
                gi = np.zeros_like(data)
                gi.flat[flat_idx] = g
                return [(self, gi)]

            return Tensor(self.tape, out_data, (self,), grad_fn)

        out_data = data.max(axis=axis, keepdims=keepdims)
        arg = np.argmax(data, axis=axis)

        def grad_fn(g):
            ge = g if keepdims else np.expand_dims(g, axis)
            gi = np.zeros_like(data)
            np.put_along_axis(gi, np.expand_dims(arg, axis), ge, axis=axis)
            return [(self, gi)]

        return Tensor(self.tape, out_data, (self,), grad_fn)

    # -- shape -----------------------------------------------------------

    def reshape(self, shape):
        old = self.data.shape
        out_data = self.data.reshape(shape)
        return Tensor(self.tape, out_data, (self,), lambda g: [(self, g.reshape(old))])

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ContractError("T expects a rank-2 array")
        return Tensor(self.tape, self.data.T.copy(), (self,), lambda g: [(self, g.T.copy())])


class Tape:
    """Append-only record of tensors; gradients map node id -> array."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.gradients: dict[int, np.ndarray] = {}

    def _register(self, t: Tensor) -> int:
        self.nodes.append(t)
        return len(self.nodes) - 1

    def tensor(self, data) -> Tensor:
        """Create a leaf tensor. Leaves must be finite."""
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise ContractError("leaf tensor contains non-finite entries")
        return Tensor(self, arr)

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        """Populate gradients of everything reachable from the scalar `root`.

        Leaves that the root does not reach get zero gradients. Repeated
        calls reset previous gradients first; the sweep order is the exact
        reverse of construction order, so results are bit-reproducible.
        """
        if root.tape is not self:
            raise ContractError("root tensor belongs to a different tape")
        if root.data.shape != ():
            raise ContractError(f"backward root must be scalar, got shape {root.data.shape}")
        self.gradients = {root.id: np.ones((), dtype=np.float64)}
        for t in reversed(self.nodes[: root.id + 1]):
            g = self.gradients.get(t.id)
            if g is None or t._grad_fn is None:
                continue
            for parent, pg in t._grad_fn(g):
                cur = self.gradients.get(parent.id)
                self.gradients[parent.id] = pg if cur is None else cur + pg
        for t in self.nodes:
            if t._grad_fn is None and t.id not in self.gradients:
                self.gradients[t.id] = np.zeros_like(t.data)
        return self.gradients


# -- free functions -------------------------------------------------------


def concat(tensors) -> Tensor:
    """Concatenate tensors along axis 0."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    tape = tensors[0].tape
    for t in tensors:
        if t.tape is not tape:
            raise ContractError("operands live on different tapes")
    out_data = np.concatenate([t.data for t in tensors], axis=0)
    lengths = [t.data.shape[0] for t in tensors]

    def grad_fn(g):
        pairs = []
        off = 0
        for t, n in zip(tensors, lengths):
            pairs.append((t, g[off:off + n]))
            off += n
        return pairs

    return Tensor(tape, out_data, tuple(tensors), grad_fn)


def gather(t: Tensor, indices) -> Tensor:
    """Select rows (axis 0) of `t` by integer index; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ContractError("gather indices must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= t.data.shape[0]):
        raise ContractError("gather index out of range")
    out_data = t.data[idx]

    def grad_fn(g):
        gi = np.zeros_like(t.data)
        np.add.at(gi, idx, g)
        return [(t, gi)]

    return Tensor(t.tape, out_data, (t,), grad_fn)


def tile_rows(t: Tensor, k: int) -> Tensor:
    """Repeat every row of `t` k times in place: row i maps to rows i*k..i*k+k-1."""
    if k < 1:
        raise ContractError("tile factor must be >= 1")
    out_data = np.repeat(t.data, k, axis=0)
    shape = t.data.shape

    def grad_fn(g):
        return [(t, g.reshape((shape[0], k) + shape[1:]).sum(axis=1))]

    return Tensor(t.tape, out_data, (t,), grad_fn)


def l2_normalize(t: Tensor) -> Tensor:
    """Scale a rank-1 tensor to unit Euclidean norm."""
    if t.data.ndim != 1:
        raise ContractError("l2_normalize expects a rank-1 tensor")
    if not np.any(t.data):
        raise DomainError("cannot normalize the zero vector")
    norm = (t * t).sum() ** 0.5
    return t / norm


def l2_normalize_np(v: np.ndarray) -> np.ndarray:
    """Plain-array twin of l2_normalize."""
    v = _as_array(v)
    if not np.any(v):
        raise DomainError("cannot normalize the zero vector")
    return v / np.sqrt((v * v).sum())


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic and central-difference gradients.

    Coordinates where the one-sided difference quotients disagree (a kink of
    relu/abs/max/nearest-neighbor selection) are flagged in `kinks` and
    excluded from the pass decision rather than failed.
    """

    passed: bool
    max_rel_error: float
    rel_errors: np.ndarray
    kinks: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def __bool__(self):
        return self.passed


def gradient_check(f, x, h=1e-5, tol=1e-4, kink_tol=1e-3) -> GradCheckReport:
    """Compare the taped gradient of f against central finite differences.

    `f` maps a leaf tensor (created on a fresh tape) to a scalar tensor;
    `x` is the evaluation point. Relative error uses max(|analytic|,
    |numeric|) as the scale, falling back to absolute error below 1e-6.
    """
    x = _as_array(x)

    def value(xv):
        tape = Tape()
        out = f(tape.tensor(xv))
        val = float(out.data)
        if not np.isfinite(val):
            raise EvaluationError("function value is not finite")
        return val

    tape = Tape()
    leaf = tape.tensor(x)
    out = f(leaf)
    if float(out.data) != float(out.data):  # NaN
        raise EvaluationError("function value is not finite")
    tape.backward(out)
    analytic = leaf.grad.reshape(-1).copy()
    base = float(out.data)

    flat = x.reshape(-1)
    numeric = np.zeros_like(flat)
    kinks = np.zeros(flat.size, dtype=bool)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp = value(xp.reshape(x.shape))
        fm = value(xm.reshape(x.shape))
        numeric[i] = (fp - fm) / (2.0 * h)
        fwd = (fp - base) / h
        bwd = (base - fm) / h
        scale = max(abs(fwd), abs(bwd), 1.0)
        if abs(fwd - bwd) / scale > kink_tol:
            kinks[i] = True

    rel = np.zeros_like(flat)
    for i in range(flat.size):
        scale = max(abs(analytic[i]), abs(numeric[i]))
        diff = abs(analytic[i] - numeric[i])
        rel[i] = diff / scale if scale > 1e-6 else diff
    smooth = ~kinks
    max_rel = float(rel[smooth].max()) if smooth.any() else 0.0
    return GradCheckReport(
        passed=bool(max_rel < tol),
        max_rel_error=max_rel,
        rel_errors=rel.reshape(x.shape),
        kinks=kinks.reshape(x.shape),
        analytic=analytic.reshape(x.shape),
        numeric=numeric.reshape(x.shape),
    )
