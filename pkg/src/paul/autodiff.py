"""Reverse-mode automatic differentiation over dense 64-bit real matrices.

Every value in the computation graph is a 2-D C-contiguous float64 array;
scalars are 1x1 matrices. Graphs are built eagerly and are acyclic by
construction: node ids grow monotonically, so walking the reachable set in
descending id order is a valid backward schedule. One backward pass
deposits exactly one accumulated adjoint per participating node.

Numerical policies that callers rely on:
  * ``frobenius_norm`` returns a zero gradient at the zero matrix (a valid
    subgradient) instead of dividing by zero.
  * ``inverse3`` adds a relative ridge ``1e-9 * trace(a)/3 * I`` before
    inverting and rejects matrices still conditioned worse than 1e12.
  * the SVD adjoint clamps every ``1/(s_i^2 - s_j^2)`` factor (and the
    ``1/s`` factors of the subspace-completion term) to magnitude <= 1e8,
    trading bounded bias near repeated singular values for NaN-free
    gradients.

Graph construction and backward are single-threaded; node values are never
mutated after creation, so finished graphs may be read from any thread.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import PaulError

SVD_CLAMP = 1e8
INVERSE_COND_LIMIT = 1e12
INVERSE_RIDGE_REL = 1e-9
LEAKY_SLOPE = 0.01

_ids = itertools.count()
_checked = False


class AutodiffError(PaulError):
    pass


class ShapeMismatch(AutodiffError):
    pass


class NonFiniteValue(AutodiffError):
    pass


class NonScalarLoss(AutodiffError):
    pass


class DegenerateNormalMatrix(AutodiffError):
    """3x3 normal matrix is singular even after the ridge."""

    def __init__(self, frame_index=None):
        tag = "" if frame_index is None else f" (frame {frame_index})"
        super().__init__(f"degenerate normal matrix{tag}")
        self.frame_index = frame_index


def set_checked(flag):
    """Toggle finite-value validation of every created matrix."""
    global _checked
    _checked = bool(flag)


def checked_mode():
    return _checked


class Node:
    """One matrix in the graph plus the local adjoint rule that made it."""

    __slots__ = ("value", "parents", "vjp", "grad", "nid")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.nid = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Node {self.value.shape} id={self.nid}>"


def _validate(v):
    if _checked and not np.all(np.isfinite(v)):
        raise NonFiniteValue(f"non-finite entries in {v.shape} matrix")
    return v


def _out(value, parents, vjp):
    return Node(_validate(value), parents, vjp)


def constant(x):
    """Wrap a scalar or 2-D array as a graph constant."""
    if isinstance(x, Node):
        return x
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    if v.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got ndim={v.ndim}")
    return Node(_validate(np.ascontiguousarray(v)))


def leaf(x):
    """A trainable parameter node (same as a constant, by convention)."""
    return constant(x)


def _same_shape(a, b, op):
    if a.value.shape != b.value.shape:
        raise ShapeMismatch(f"{op}: shape {a.value.shape} vs {b.value.shape}")


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(
            f"matmul: inner dims differ, {a.value.shape} @ {b.value.shape}"
        )
    av, bv = a.value, b.value
    return _out(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    a, b = constant(a), constant(b)
    _same_shape(a, b, "add")
    return _out(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = constant(a), constant(b)
    _same_shape(a, b, "sub")
    return _out(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = constant(a), constant(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _out(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c):
    a = constant(a)
    c = float(c)
    return _out(a.value * c, (a,), lambda g: (g * c,))


def square(a):
    a = constant(a)
    av = a.value
    return _out(av * av, (a,), lambda g: (2.0 * av * g,))


def leaky(a, slope=LEAKY_SLOPE):
    a = constant(a)
    pos = a.value >= 0.0
    factor = np.where(pos, 1.0, slope)
    return _out(a.value * factor, (a,), lambda g: (g * factor,))


def total(a):
    """Sum of all entries as a 1x1 node."""
    a = constant(a)
    shp = a.value.shape
    return _out(
        np.array([[a.value.sum()]]),
        (a,),
        lambda g: (np.full(shp, g[0, 0]),),
    )


def frobenius_norm(a):
    a = constant(a)
    av = a.value
    v = float(np.sqrt((av * av).sum()))

    def vjp(g):
        if v == 0.0:
            return (np.zeros_like(av),)
        return ((g[0, 0] / v) * av,)

    return _out(np.array([[v]]), (a,), vjp)


def transpose(a):
    a = constant(a)
    return _out(np.ascontiguousarray(a.value.T), (a,), lambda g: (g.T,))


def reshape(a, rows, cols):
    a = constant(a)
    shp = a.value.shape
    if rows * cols != shp[0] * shp[1]:
        raise ShapeMismatch(f"reshape: {shp} -> ({rows},{cols})")
    return _out(a.value.reshape(rows, cols), (a,), lambda g: (g.reshape(shp),))


def take_rows(a, idx):
    a = constant(a)
    idx = np.asarray(idx, dtype=np.intp)
    shp = a.value.shape

    def vjp(g):
        z = np.zeros(shp)
        np.add.at(z, idx, g)
        return (z,)

    return _out(a.value[idx], (a,), vjp)


def take_cols(a, idx):
    a = constant(a)
    idx = np.asarray(idx, dtype=np.intp)
    shp = a.value.shape

    def vjp(g):
        z = np.zeros(shp)
        np.add.at(z, (slice(None), idx), g)
        return (z,)

    return _out(np.ascontiguousarray(a.value[:, idx]), (a,), vjp)


def vstack(a, b):
    a, b = constant(a), constant(b)
    if a.value.shape[1] != b.value.shape[1]:
        raise ShapeMismatch(f"vstack: {a.value.shape} over {b.value.shape}")
    r = a.value.shape[0]
    return _out(
        np.concatenate([a.value, b.value], axis=0),
        (a, b),
        lambda g: (g[:r], g[r:]),
    )


def add_bias(x, b):
    """Add a column vector to every column of ``x``."""
    x, b = constant(x), constant(b)
    if b.value.shape != (x.value.shape[0], 1):
        raise ShapeMismatch(f"add_bias: {x.value.shape} + {b.value.shape}")
    return _out(
        x.value + b.value,
        (x, b),
        lambda g: (g, g.sum(axis=1, keepdims=True)),
    )


def cross3(a, b):
    """Cross product of two 1x3 rows."""
    a, b = constant(a), constant(b)
    if a.value.shape != (1, 3) or b.value.shape != (1, 3):
        raise ShapeMismatch("cross3 expects 1x3 rows")
    av, bv = a.value, b.value
    return _out(
        np.cross(av, bv),
        (a, b),
        lambda g: (np.cross(bv, g), np.cross(g, av)),
    )


def stop_gradient(a):
    """Pass the value through; the backward rule deposits nothing."""
    a = constant(a)
    return Node(a.value)


INVERSE_BACKWARD_TRUNC = 1e-8


def inverse3(a, frame_index=None):
    """Ridge-stabilized inverse of a 3x3 matrix.

    The ridge ``1e-9 * trace(a)/3`` is treated as a constant in the
    adjoint; its contribution is ~1e-9 relative and far below the gradient
    check tolerance. The adjoint itself is computed with a spectrally
    truncated inverse (singular values below ``1e-8 * s_max`` dropped):
    directions the ridge had to pin are unconstrained by the data, and
    without truncation they amplify float noise by ``1/eps^2``. For
    well-conditioned inputs the truncation never engages.
    """
    a = constant(a)
    if a.value.shape != (3, 3):
        raise ShapeMismatch(f"inverse3 expects 3x3, got {a.value.shape}")
    eps = INVERSE_RIDGE_REL * np.trace(a.value) / 3.0
    m = a.value + eps * np.eye(3)
    u, sv, vt = np.linalg.svd(m)
    if sv[-1] <= 0.0 or sv[0] / sv[-1] > INVERSE_COND_LIMIT:
        raise DegenerateNormalMatrix(frame_index)
    inv = np.linalg.inv(m)
    weights = np.where(sv > INVERSE_BACKWARD_TRUNC * sv[0], 1.0 / sv, 0.0)
    trunc = (vt.T * weights[None, :]) @ u.T

    return _out(inv, (a,), lambda g: (-trunc.T @ g @ trunc.T,))


def _svd_adjoint(U, s, Vt, gU, gs, gV):
    """Input adjoint of a thin SVD ``a = U diag(s) Vt`` with k = rows(a).

    Linear in each output adjoint, so the per-output contributions computed
    here sum to the full adjoint during backward accumulation.
    """
    k = s.size
    n = Vt.shape[1]
    inner = np.zeros((k, k))
    if gs is not None:
        inner += np.diag(gs.reshape(-1))
    if gU is not None or gV is not None:
        s2 = s * s
        denom = s2[None, :] - s2[:, None]  # s_j^2 - s_i^2
        with np.errstate(divide="ignore"):
            F = 1.0 / denom
        F[~np.isfinite(F)] = 0.0
        np.clip(F, -SVD_CLAMP, SVD_CLAMP, out=F)
        if gU is not None:
            P = U.T @ gU
            inner += (F * (P - P.T)) * s[None, :]
        if gV is not None:
            Q = Vt @ gV
            inner += s[:, None] * (F * (Q - Q.T))
    gA = U @ inner @ Vt
    if gV is not None and n > k:
        sinv = np.clip(1.0 / np.where(s == 0.0, np.inf, s), -SVD_CLAMP, SVD_CLAMP)
        proj = gV.T - (gV.T @ Vt.T) @ Vt  # gV^T (I - V V^T)
        gA += (U * sinv[None, :]) @ proj
    return gA


def svd_small(a):
    """Thin SVD of a short wide matrix (2x3 shapes, or 3xP for k rows <= cols).

    Returns ``(U, sigma, V)`` nodes with ``U`` square ``k x k`` orthogonal,
    ``sigma`` a descending nonnegative ``1 x k`` row, and ``V`` of shape
    ``n x k`` with orthonormal columns, so ``a = U @ diag(sigma) @ V.T``.
    """
    a = constant(a)
    k, n = a.value.shape
    if k > n or k not in (2, 3):
        raise ShapeMismatch(f"svd_small expects 2xN or 3xN with rows<=cols, got {a.value.shape}")
    U, s, Vt = np.linalg.svd(a.value, full_matrices=False)

    u_node = _out(U, (a,), lambda g: (_svd_adjoint(U, s, Vt, g, None, None),))
    s_node = _out(
        s.reshape(1, k), (a,), lambda g: (_svd_adjoint(U, s, Vt, None, g, None),)
    )
    v_node = _out(
        np.ascontiguousarray(Vt.T),
        (a,),
        lambda g: (_svd_adjoint(U, s, Vt, None, None, g),),
    )
    return u_node, s_node, v_node


def elementwise(kind, a, b=None):
    """Dispatch by op kind: add, sub, scale, leaky-activation, square."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "leaky-activation":
        return leaky(a)
    if kind == "square":
        return square(a)
    raise AutodiffError(f"unknown elementwise kind: {kind!r}")


def backward(loss):
    """Propagate adjoints from a scalar loss to every reachable node.

    Adjoints are zero-initialized for the reachable set before the pass;
    after it, ``node.grad`` holds d(loss)/d(node.value). The graph can be
    freed afterwards by dropping the loss reference.
    """
    if not isinstance(loss, Node):
        raise AutodiffError("backward expects a Node")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got {loss.value.shape}")

    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        n = stack.pop()
        if n.nid in seen:
            continue
        seen.add(n.nid)
        nodes.append(n)
        stack.extend(n.parents)
    nodes.sort(key=lambda n: n.nid, reverse=True)

    for n in nodes:
        n.grad = None
    loss.grad = np.ones((1, 1))

    for n in nodes:
        g = n.grad
        if g is None or n.vjp is None:
            continue
        for p, pg in zip(n.parents, n.vjp(g)):
            if pg is None:
                continue
            p.grad = pg if p.grad is None else p.grad + pg


def grad_of(node):
    """Adjoint of a node after backward; zeros if the loss never reached it."""
    return node.grad if node.grad is not None else np.zeros_like(node.value)
