"""Tape-based reverse-mode differentiation over matrix-level primitives.

Every op accepts plain arrays or :class:`Var` values. With no ``Var`` among its
arguments an op just computes the array result, so layer code written against
these ops runs unchanged with or without a tape.

Adjoints are registered per primitive at matrix level (Cholesky, triangular
and general solves, convolution, ...); scalar-level taping is never used.
"""
from __future__ import annotations

import builtins
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from . import numerics
from .errors import LipcertError, ShapeMismatch


class Var:
    """One node on a :class:`Tape`."""

    __array_ufunc__ = None  # make numpy defer to Var's reflected operators
    __slots__ = ("tape", "index", "value", "op", "parents", "fwd", "vjp", "name")

    def __init__(self, tape, value, op, parents=(), fwd=None, vjp=None, name=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.fwd = fwd
        self.vjp = vjp
        self.name = name
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var#{self.index}<{self.op}{label} shape={self.shape}>"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only, topologically ordered record of one computation."""

    def __init__(self):
        self.nodes: list[Var] = []

    def param(self, value, name=None) -> Var:
        return Var(self, np.array(value, dtype=np.float64), "leaf", name=name)

    input = param

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64), "const")

    def leaves(self):
        return [n for n in self.nodes if n.op == "leaf"]

    def backward(self, output, seed=None):
        return backward(output, seed)

    def evaluate(self, inputs=None, output=None):
        return evaluate(self, inputs, output)


@dataclass
class GradientReport:
    """Gradients of one backward pass, keyed by leaf name (or leaf index)."""

    grads: dict = field(default_factory=dict)
    max_rel_error: float | None = None

    def __getitem__(self, key):
        if isinstance(key, Var):
            key = key.name if key.name is not None else key.index
        return self.grads[key]

    def __contains__(self, key):
        return key in self.grads


# -- plumbing ---------------------------------------------------------------

def _find_tape(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _lift(tape, a):
    if isinstance(a, Var):
        if a.tape is not tape:
            raise ValueError("mixing variables from different tapes")
        return a
    return tape.const(a)


def _op(name, fwd, vjp, *args):
    """Run ``fwd`` eagerly; record a node when any argument is a Var."""
    tape = _find_tape(args)
    if tape is None:
        return _call(name, fwd, [np.asarray(a, dtype=np.float64) for a in args])
    parents = tuple(_lift(tape, a) for a in args)
    value = _call(name, fwd, [p.value for p in parents])
    return Var(tape, value, name, parents, fwd, vjp)


def _call(name, fwd, values):
    try:
        return np.asarray(fwd(*values), dtype=np.float64)
    except LipcertError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if any(w in msg for w in ("shape", "broadcast", "dimension", "mismatch")):
            raise ShapeMismatch(f"{name}: {msg}") from exc
        raise


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def value_of(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# -- evaluation / differentiation -------------------------------------------

def evaluate(tape: Tape, inputs=None, output=None):
    """Replay ``tape`` with new leaf values; returns the output node's value.

    ``inputs`` maps leaf names or leaf Vars to arrays. Node values are
    updated in place so that a following :func:`backward` sees them.
    """
    inputs = inputs or {}
    by_key = {}
    for k, v in inputs.items():
        by_key[k.index if isinstance(k, Var) else k] = np.asarray(v, dtype=np.float64)
    for node in tape.nodes:
        if node.op in ("leaf", "const"):
            if node.index in by_key:
                node.value = by_key[node.index]
            elif node.name is not None and node.name in by_key:
                node.value = by_key[node.name]
            continue
        node.value = _call(node.op, node.fwd, [p.value for p in node.parents])
    if not tape.nodes:
        raise ValueError("empty tape")
    out = tape.nodes[-1] if output is None else output
    return out.value


def backward(output: Var, seed=None) -> GradientReport:
    """Reverse sweep from ``output``; gradients for every leaf on the tape.

    Leaves with no path to ``output`` get a zero gradient.
    """
    tape = output.tape
    if seed is None:
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise ShapeMismatch(f"seed shape {seed.shape} != output shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {output.index: seed}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.pop(node.index, None) if node.parents else grads.get(node.index)
        if g is None or not node.parents:
            continue
        contribs = node.vjp(g, node.value, *[p.value for p in node.parents])
        for p, c in zip(node.parents, contribs):
            if c is None:
                continue
            c = unbroadcast(np.asarray(c, dtype=np.float64), p.value.shape)
            if p.index in grads:
                grads[p.index] = grads[p.index] + c
            else:
                grads[p.index] = c
    report = GradientReport()
    for leaf in tape.leaves():
        key = leaf.name if leaf.name is not None else leaf.index
        report.grads[key] = grads.get(leaf.index, np.zeros_like(leaf.value))
    return report


def finite_diff_check(f: Callable, params: dict, h=1e-5, report=False):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` receives a dict of Vars (same keys as ``params``) and returns a scalar
    Var. Coordinates where both gradients are below 1e-10 are skipped.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    out = f({k: tape.param(v, name=k) for k, v in params.items()})
    if out.value.size != 1:
        raise ShapeMismatch("finite_diff_check needs a scalar-valued function")
    rep = backward(out)

    def scalar(vals):
        return float(np.sum(value_of(f(vals))))

    worst = 0.0
    for k, base in params.items():
        analytic = rep.grads[k]
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = scalar(params)
            flat[i] = orig - h
            fm = scalar(params)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = float(analytic.reshape(-1)[i])
            if builtins.abs(ana) < 1e-10 and builtins.abs(num) < 1e-10:
                continue
            err = builtins.abs(ana - num) / builtins.max(builtins.abs(ana), builtins.abs(num), 1e-8)
            worst = builtins.max(worst, err)
    if report:
        rep.max_rel_error = worst
        return rep
    return worst


# -- primitives ---------------------------------------------------------------

def add(a, b):
    return _op("add", np.add, lambda g, out, a, b: (g, g), a, b)


def sub(a, b):
    return _op("sub", np.subtract, lambda g, out, a, b: (g, -g), a, b)


def mul(a, b):
    return _op("mul", np.multiply, lambda g, out, a, b: (g * b, g * a), a, b)


def div(a, b):
    return _op("div", np.divide, lambda g, out, a, b: (g / b, -g * out / b), a, b)


def neg(a):
    return _op("neg", np.negative, lambda g, out, a: (-g,), a)


def matmul(a, b):
    def fwd(a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        return a @ b

    return _op("matmul", fwd, lambda g, out, a, b: (g @ b.T, a.T @ g), a, b)


def transpose(a):
    return _op("transpose", lambda a: a.T, lambda g, out, a: (g.T,), a)


def reshape(a, shape):
    shape = tuple(shape)
    return _op("reshape", lambda a: a.reshape(shape), lambda g, out, a: (g.reshape(a.shape),), a)


def getitem(a, idx):
    def vjp(g, out, a):
        full = np.zeros_like(a)
        np.add.at(full, idx, g)
        return (full,)

    return _op("getitem", lambda a: a[idx], vjp, a)


def concat(items, axis=0):
    def fwd(*vals):
        return np.concatenate(vals, axis=axis)

    def vjp(g, out, *vals):
        cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return tuple(np.split(g, cuts, axis=axis))

    return _op("concat", fwd, vjp, *items)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    def vjp(g, out, a):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _op("sum", lambda a: np.sum(a, axis=axis, keepdims=keepdims), vjp, a)


def mean(a, axis=None):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return sum(a, axis=axis) * (1.0 / n)


def abs(a):  # noqa: A001
    return _op("abs", np.abs, lambda g, out, a: (g * np.sign(a),), a)


def exp(a):
    return _op("exp", np.exp, lambda g, out, a: (g * out,), a)


def log(a):
    return _op("log", np.log, lambda g, out, a: (g / a,), a)


def relu(a):
    return _op("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),), a)


def safe_pow(a, p):
    """a**p on positive entries, 0 (with zero gradient) where a == 0."""

    def fwd(a):
        out = np.zeros_like(a)
        pos = a > 0
        out[pos] = a[pos] ** p
        return out

    def vjp(g, out, a):
        d = np.zeros_like(a)
        pos = a > 0
        d[pos] = p * a[pos] ** (p - 1)
        return (g * d,)

    return _op("pow", fwd, vjp, a)


def safe_sqrt(a):
    return safe_pow(a, 0.5)


def detach(a):
    """Identity in value; blocks gradient flow."""
    return _op("detach", lambda a: a.copy(), lambda g, out, a: (None,), a)


def minmax(a, axis=-1):
    """Sort consecutive pairs along ``axis`` into (min, max)."""
    from .errors import OddWidth

    def split(x):
        x = np.moveaxis(x, axis, -1)
        if x.shape[-1] % 2:
            raise OddWidth(f"minmax needs an even width, got {x.shape[-1]}")
        return x[..., 0::2], x[..., 1::2]

    def fwd(a):
        lo, hi = split(a)
        out = np.empty(np.moveaxis(a, axis, -1).shape)
        out[..., 0::2] = np.minimum(lo, hi)
        out[..., 1::2] = np.maximum(lo, hi)
        return np.moveaxis(out, -1, axis)

    def vjp(g, out, a):
        lo, hi = split(a)
        swap = lo > hi  # ties keep order: first element takes the min slot
        gm = np.moveaxis(g, axis, -1)
        g_lo, g_hi = gm[..., 0::2], gm[..., 1::2]
        res = np.empty_like(gm)
        res[..., 0::2] = np.where(swap, g_hi, g_lo)
        res[..., 1::2] = np.where(swap, g_lo, g_hi)
        return (np.moveaxis(res, -1, axis),)

    return _op("minmax", fwd, vjp, a)


def max(a, axis=-1):  # noqa: A001
    """Max reduction; the gradient goes to the first maximal entry."""

    def vjp(g, out, a):
        am = np.argmax(a, axis=axis)
        res = np.zeros_like(a)
        np.put_along_axis(res, np.expand_dims(am, axis), np.expand_dims(g, axis), axis=axis)
        return (res,)

    return _op("max", lambda a: np.max(a, axis=axis), vjp, a)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels, dtype=np.int64)

    def fwd(z):
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        return np.mean(lse - z[np.arange(len(z)), labels])

    def vjp(g, out, z):
        m = z.max(axis=1, keepdims=True)
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(z)), labels] -= 1.0
        return (g * p / len(z),)

    return _op("xent", fwd, vjp, logits)


def _conv_patches(x, k):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_value(x, kernel):
    """Stride-1, zero-padded 'same' cross-correlation. x: (B,Cin,H,W), kernel: (Cout,Cin,k,k)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeMismatch(f"conv2d shapes {x.shape} and {kernel.shape} are incompatible")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise ShapeMismatch("conv2d needs a square, odd-sized kernel")
    return np.einsum("bchwij,ocij->bohw", _conv_patches(x, k), kernel, optimize=True)


def conv2d_transpose_value(y, kernel):
    """Adjoint of :func:`conv2d_value` with respect to its input."""
    return conv2d_value(y, np.flip(kernel, axis=(2, 3)).transpose(1, 0, 2, 3))


def conv2d(x, kernel):
    def vjp(g, out, x, kernel):
        gx = conv2d_transpose_value(g, kernel)
        gk = np.einsum("bchwij,bohw->ocij", _conv_patches(x, kernel.shape[-1]), g, optimize=True)
        return gx, gk

    return _op("conv2d", conv2d_value, vjp, x, kernel)


def cholesky(sigma):
    """Cholesky factor of the symmetric part of ``sigma``."""

    def fwd(s):
        return numerics.cholesky(0.5 * (s + s.T))

    def vjp(g, L, s):
        p = np.tril(L.T @ g)
        p[np.diag_indices_from(p)] *= 0.5
        s1 = sla.solve_triangular(L, p, lower=True, trans=1, check_finite=False)
        sbar = sla.solve_triangular(L, s1.T, lower=True, trans=1, check_finite=False).T
        return (0.5 * (sbar + sbar.T),)

    return _op("cholesky", fwd, vjp, sigma)


def solve_triangular(l, b):
    """X with L X = B, L lower-triangular (upper part ignored)."""

    def vjp(g, x, l, b):
        bbar = sla.solve_triangular(l, g, lower=True, trans=1, check_finite=False)
        return -np.tril(bbar @ x.T), bbar

    return _op("solve_triangular", numerics.solve_triangular, vjp, l, b)


def solve_general(a, b):
    """X with A X = B via partial-pivot LU."""

    def vjp(g, x, a, b):
        bbar = numerics.solve_general(a, g, trans=True)
        return -bbar @ x.T, bbar

    return _op("solve_general", numerics.solve_general, vjp, a, b)


def eye(n):
    return np.eye(n)
