"""Minimal tensor type and reverse-mode differentiation on an explicit tape.

Values are rank-2 float64 arrays (vectors are 1 x n rows, scalars 1 x 1).
Every operation appends one node to a Tape; node order is the topological
order, so the backward pass is a single reverse sweep over the node list.

Backward rules are themselves written with tape operations, so the adjoint
of a node is a new node on the same tape.  Gradients therefore stay
differentiable: a scalar assembled from the output of ``gradients`` can be
differentiated again by calling ``gradients`` on it, which is how mixed
second-order terms (parameter gradients of expressions containing
input-gradients of networks) are computed exactly.
"""

from __future__ import annotations

import numpy as np


class DiffcoreError(Exception):
    """Base class for engine errors."""


class NotPositiveDefiniteError(DiffcoreError):
    """A factorization hit a nonpositive pivot.

    ``pivot`` is the zero-based index of the first failing pivot.
    """

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(f"matrix not positive definite: pivot {pivot} = {value:.6g}")


class NonScalarOutputError(DiffcoreError):
    """grad() was handed a function whose output is not 1 x 1."""


class NonDifferentiablePrimitiveError(DiffcoreError):
    """Backward pass reached a primitive with no derivative rule."""


def _as_value(x) -> np.ndarray:
    """Coerce scalars / 1-D / 2-D input to a C-order float64 rank-2 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ValueError(f"rank-{a.ndim} arrays are not supported")
    return np.ascontiguousarray(a)


class Tensor:
    """A node on a tape: a rank-2 value plus the record of how it was made."""

    __slots__ = ("tape", "idx", "value", "parents", "op", "bwd", "requires_grad")

    def __init__(self, tape, idx, value, parents, op, requires_grad):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents
        self.op = op
        self.bwd = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() on shape {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"

    # operator sugar; float operands use the scale/shift primitives
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations plus adjoint bookkeeping."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def _append(self, value, parents, op, requires_grad) -> Tensor:
        t = Tensor(self, len(self.nodes), value, parents, op, requires_grad)
        self.nodes.append(t)
        return t

    def constant(self, x) -> Tensor:
        return self._append(_as_value(x), (), "constant", False)

    def input(self, x) -> Tensor:
        """A leaf whose adjoint will be tracked."""
        return self._append(_as_value(x), (), "input", True)

    def gradients(self, output: Tensor, leaves, seed: Tensor | None = None):
        """Adjoints of ``leaves`` for a backward pass seeded at ``output``.

        The returned adjoints are Tensors on this tape (zeros for leaves the
        output does not depend on), so they can enter further computation.
        The sweep visits each node at most once, in strict reverse order.
        """
        if output.tape is not self:
            raise ValueError("output was recorded on a different tape")
        if seed is None:
            seed = self.constant(np.ones_like(output.value))
        adjoint: list[Tensor | None] = [None] * (output.idx + 1)
        adjoint[output.idx] = seed
        for i in range(output.idx, -1, -1):
            g = adjoint[i]
            if g is None:
                continue
            node = self.nodes[i]
            if not node.parents:
                continue
            if node.bwd is None:
                if any(p.requires_grad for p in node.parents):
                    raise NonDifferentiablePrimitiveError(
                        f"primitive {node.op!r} has no derivative rule"
                    )
                continue
            contribs = node.bwd(g)
            for p, c in zip(node.parents, contribs):
                if c is None or not p.requires_grad:
                    continue
                prev = adjoint[p.idx]
                adjoint[p.idx] = c if prev is None else add(prev, c)
        out = []
        for leaf in leaves:
            a = adjoint[leaf.idx] if leaf.idx <= output.idx else None
            if a is None:
                a = self.constant(np.zeros_like(leaf.value))
            out.append(a)
        return out


def _lift(tape: Tape, x) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    """Reduce an adjoint back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return sum_all(g)
    if shape[0] == 1:
        return sum_rows(g)
    if shape[1] == 1:
        return sum_cols(g)
    raise ValueError(f"cannot reduce {g.shape} to {shape}")


def _broadcast_ok(sa, sb) -> bool:
    if sa == sb or sa == (1, 1) or sb == (1, 1):
        return True
    if sa[1] == sb[1] and (sa[0] == 1 or sb[0] == 1):
        return True
    if sa[0] == sb[0] and (sa[1] == 1 or sb[1] == 1):
        return True
    return False


def _binary(a: Tensor, b: Tensor, op: str):
    if a.tape is not b.tape:
        raise ValueError(f"{op}: operands on different tapes")
    if not _broadcast_ok(a.shape, b.shape):
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "add")
    out = a.tape._append(a.value + b.value, (a, b), "add",
                         a.requires_grad or b.requires_grad)
    out.bwd = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary(a, b, "mul")
    out = a.tape._append(a.value * b.value, (a, b), "mul",
                         a.requires_grad or b.requires_grad)
    out.bwd = lambda g: (_unbroadcast(mul(g, b), a.shape),
                         _unbroadcast(mul(g, a), b.shape))
    return out


def neg(a: Tensor) -> Tensor:
    out = a.tape._append(-a.value, (a,), "neg", a.requires_grad)
    out.bwd = lambda g: (neg(g),)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain float (not differentiated with respect to c)."""
    out = a.tape._append(a.value * c, (a,), "scale", a.requires_grad)
    out.bwd = lambda g: (scale(g, c),)
    return out


def shift(a: Tensor, c: float) -> Tensor:
    """Add a plain float elementwise."""
    out = a.tape._append(a.value + c, (a,), "shift", a.requires_grad)
    out.bwd = lambda g: (g,)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.tape is not b.tape:
        raise ValueError("matmul: operands on different tapes")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: {a.shape} @ {b.shape}")
    out = a.tape._append(a.value @ b.value, (a, b), "matmul",
                         a.requires_grad or b.requires_grad)
    out.bwd = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


def transpose(a: Tensor) -> Tensor:
    out = a.tape._append(np.ascontiguousarray(a.value.T), (a,), "transpose",
                         a.requires_grad)
    out.bwd = lambda g: (transpose(g),)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    r, c = shape
    out = a.tape._append(a.value.reshape(r, c), (a,), "reshape", a.requires_grad)
    out.bwd = lambda g: (reshape(g, a.shape),)
    return out


def tanh(a: Tensor) -> Tensor:
    out = a.tape._append(np.tanh(a.value), (a,), "tanh", a.requires_grad)
    out.bwd = lambda g: (mul(g, shift(neg(mul(out, out)), 1.0)),)
    return out


def exp(a: Tensor) -> Tensor:
    v = np.exp(a.value)
    if not np.all(np.isfinite(v)):
        raise DiffcoreError("exp overflow")
    out = a.tape._append(v, (a,), "exp", a.requires_grad)
    out.bwd = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0.0):
        raise DiffcoreError("log of nonpositive value")
    out = a.tape._append(np.log(a.value), (a,), "log", a.requires_grad)
    out.bwd = lambda g: (mul(g, reciprocal(a)),)
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.value < 0.0):
        raise DiffcoreError("sqrt of negative value")
    out = a.tape._append(np.sqrt(a.value), (a,), "sqrt", a.requires_grad)
    out.bwd = lambda g: (mul(g, scale(reciprocal(out), 0.5)),)
    return out


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.value == 0.0):
        raise DiffcoreError("reciprocal of zero")
    out = a.tape._append(1.0 / a.value, (a,), "reciprocal", a.requires_grad)
    out.bwd = lambda g: (neg(mul(g, mul(out, out))),)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    # overflow-safe log(1 + e^x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Tensor) -> Tensor:
    out = a.tape._append(_softplus_np(a.value), (a,), "softplus", a.requires_grad)
    out.bwd = lambda g: (mul(g, sigmoid(a)),)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = a.tape._append(_sigmoid_np(a.value), (a,), "sigmoid", a.requires_grad)
    out.bwd = lambda g: (mul(g, mul(out, shift(neg(out), 1.0))),)
    return out


def sin(a: Tensor) -> Tensor:
    out = a.tape._append(np.sin(a.value), (a,), "sin", a.requires_grad)
    out.bwd = lambda g: (mul(g, cos(a)),)
    return out


def cos(a: Tensor) -> Tensor:
    out = a.tape._append(np.cos(a.value), (a,), "cos", a.requires_grad)
    out.bwd = lambda g: (neg(mul(g, sin(a))),)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = a.tape._append(np.array([[a.value.sum()]]), (a,), "sum_all",
                         a.requires_grad)
    out.bwd = lambda g: (mul(g, a.tape.constant(np.ones_like(a.value))),)
    return out


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the row axis: (r, c) -> (1, c)."""
    out = a.tape._append(a.value.sum(axis=0, keepdims=True), (a,), "sum_rows",
                         a.requires_grad)
    out.bwd = lambda g: (mul(g, a.tape.constant(np.ones_like(a.value))),)
    return out


def sum_cols(a: Tensor) -> Tensor:
    """Sum over the column axis: (r, c) -> (r, 1)."""
    out = a.tape._append(a.value.sum(axis=1, keepdims=True), (a,), "sum_cols",
                         a.requires_grad)
    out.bwd = lambda g: (mul(g, a.tape.constant(np.ones_like(a.value))),)
    return out


def sumsq(a: Tensor) -> Tensor:
    """Squared Frobenius norm, as a 1 x 1 tensor."""
    out = a.tape._append(np.array([[float(np.sum(a.value * a.value))]]), (a,),
                         "sumsq", a.requires_grad)
    out.bwd = lambda g: (mul(g, scale(a, 2.0)),)
    return out


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.value.size)


def cols(a: Tensor, j0: int, j1: int) -> Tensor:
    out = a.tape._append(np.ascontiguousarray(a.value[:, j0:j1]), (a,), "cols",
                         a.requires_grad)
    out.bwd = lambda g: (_pad_cols(g, j0, a.shape[1]),)
    return out


def rows(a: Tensor, i0: int, i1: int) -> Tensor:
    out = a.tape._append(np.ascontiguousarray(a.value[i0:i1, :]), (a,), "rows",
                         a.requires_grad)
    out.bwd = lambda g: (_pad_rows(g, i0, a.shape[0]),)
    return out


def _pad_cols(a: Tensor, j0: int, total: int) -> Tensor:
    v = np.zeros((a.shape[0], total))
    v[:, j0:j0 + a.shape[1]] = a.value
    out = a.tape._append(v, (a,), "pad_cols", a.requires_grad)
    out.bwd = lambda g: (cols(g, j0, j0 + a.shape[1]),)
    return out


def _pad_rows(a: Tensor, i0: int, total: int) -> Tensor:
    v = np.zeros((total, a.shape[1]))
    v[i0:i0 + a.shape[0], :] = a.value
    out = a.tape._append(v, (a,), "pad_rows", a.requires_grad)
    out.bwd = lambda g: (rows(g, i0, i0 + a.shape[0]),)
    return out


def concat_cols(parts) -> Tensor:
    parts = list(parts)
    tape = parts[0].tape
    v = np.concatenate([p.value for p in parts], axis=1)
    out = tape._append(v, tuple(parts), "concat_cols",
                       any(p.requires_grad for p in parts))

    def bwd(g):
        res, j = [], 0
        for p in parts:
            res.append(cols(g, j, j + p.shape[1]))
            j += p.shape[1]
        return tuple(res)

    out.bwd = bwd
    return out


def concat_rows(parts) -> Tensor:
    parts = list(parts)
    tape = parts[0].tape
    v = np.concatenate([p.value for p in parts], axis=0)
    out = tape._append(v, tuple(parts), "concat_rows",
                       any(p.requires_grad for p in parts))

    def bwd(g):
        res, i = [], 0
        for p in parts:
            res.append(rows(g, i, i + p.shape[0]))
            i += p.shape[0]
        return tuple(res)

    out.bwd = bwd
    return out


# -- Cholesky-backed matrix primitives ---------------------------------------

def cholesky_np(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix.

    Raises NotPositiveDefiniteError with the index of the first
    nonpositive pivot; the symmetry precondition is checked up front.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected square matrix, got {a.shape}")
    tol = 1e-8 * max(1.0, float(np.abs(a).max()))
    if not np.allclose(a, a.T, atol=tol):
        raise ValueError("matrix is not symmetric")
    L = np.zeros_like(a)
    for k in range(n):
        d = a[k, k] - L[k, :k] @ L[k, :k]
        if d <= 0.0:
            raise NotPositiveDefiniteError(k, float(d))
        L[k, k] = np.sqrt(d)
        for i in range(k + 1, n):
            L[i, k] = (a[i, k] - L[i, :k] @ L[k, :k]) / L[k, k]
    return L


def _chol_solve_np(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, y)


def logdet_pd(a: Tensor) -> Tensor:
    """log det of a symmetric positive definite matrix, via Cholesky."""
    L = cholesky_np(a.value)
    v = 2.0 * float(np.sum(np.log(np.diag(L))))
    out = a.tape._append(np.array([[v]]), (a,), "logdet_pd", a.requires_grad)
    out.bwd = lambda g: (mul(g, inverse_pd(a)),)
    return out


def inverse_pd(a: Tensor) -> Tensor:
    L = cholesky_np(a.value)
    inv = _chol_solve_np(L, np.eye(a.shape[0]))
    out = a.tape._append(inv, (a,), "inverse_pd", a.requires_grad)
    out.bwd = lambda g: (neg(matmul(matmul(transpose(out), g), transpose(out))),)
    return out


def solve_pd(a: Tensor, b: Tensor) -> Tensor:
    """x with A x = b for symmetric positive definite A."""
    if a.tape is not b.tape:
        raise ValueError("solve_pd: operands on different tapes")
    L = cholesky_np(a.value)
    x = _chol_solve_np(L, b.value)
    out = a.tape._append(x, (a, b), "solve_pd", a.requires_grad or b.requires_grad)

    def bwd(g):
        gb = solve_pd(a, g)
        return (neg(matmul(gb, transpose(out))), gb)

    out.bwd = bwd
    return out


# -- functional differentiation API ------------------------------------------

def cholesky_logdet(a):
    """log det via Cholesky; accepts a plain array or a tape Tensor."""
    if isinstance(a, Tensor):
        return logdet_pd(a)
    L = cholesky_np(np.asarray(a, dtype=np.float64))
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def grad(f, x) -> np.ndarray:
    """Gradient of a scalar-valued tape function at a point.

    ``f`` receives a (1, n) input Tensor and must return a 1 x 1 Tensor.
    """
    tape = Tape()
    xt = tape.input(np.asarray(x, dtype=np.float64).reshape(1, -1))
    y = f(xt)
    if not isinstance(y, Tensor):
        raise NonScalarOutputError("function did not return a Tensor")
    if y.shape != (1, 1):
        raise NonScalarOutputError(f"expected scalar output, got shape {y.shape}")
    (g,) = tape.gradients(y, [xt])
    return g.value.ravel().copy()


def jacobian(f, x) -> np.ndarray:
    """Jacobian of a vector-valued tape function; row i is the gradient of
    output component i."""
    tape = Tape()
    xt = tape.input(np.asarray(x, dtype=np.float64).reshape(1, -1))
    y = f(xt)
    if y.shape[0] != 1:
        y = transpose(y)
    m, n = y.shape[1], xt.shape[1]
    J = np.empty((m, n))
    for i in range(m):
        (g,) = tape.gradients(cols(y, i, i + 1), [xt])
        J[i] = g.value.ravel()
    return J


def grad2(f, theta) -> np.ndarray:
    """Gradient with respect to parameters of a scalar whose construction may
    itself contain tape-built derivatives (e.g. input-gradients of networks).

    Works because adjoints are tape nodes: the inner derivative recorded by
    ``Tape.gradients`` is an ordinary subgraph that the outer backward pass
    differentiates through.
    """
    return grad(f, theta)
