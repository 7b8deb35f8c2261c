"""1-Lipschitz layer zoo and LiResNet-style building blocks.

Orthogonalization routines take plain arrays or autodiff variables; the
layer classes use them both for numeric forward passes and for building the
training graph.

Conventions: batches come first, dense layers map (B, n_in) -> (B, n_out) as
``x @ W.T + b``, feature maps are (B, C, H, W).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import NonConvergence, NotPositiveDefinite, OddWidth, RankDeficient, ShapeMismatch
from .numerics import (
    SpectralEstimate, mat_exp, orthonormalize_rows, power_iteration, spectral_norm_oracle,
)

# Runtime spectral assertions for AOL/Sandwich (numeric forward only).
CHECKS = os.environ.get("LIPCERT_CHECKS", "") not in ("", "0")

TRAIN_ITERS = 1
CERT_TOL = 1e-10
CERT_MAX_ITERS = 5000


# -- orthogonalization --------------------------------------------------------

def skew(v):
    """Skew-symmetric part (V - V^T) / 2."""
    return (v - ad.transpose(v)) * 0.5


def orthogonalize_cayley(v_raw):
    """(I + V)^-1 (I - V) for V = skew(v_raw)."""
    v = skew(v_raw)
    eye = np.eye(ad.value_of(v).shape[0])
    return ad.solve_general(eye + v, eye - v)


def orthogonalize_matexp(v_raw):
    return mat_exp(skew(v_raw))


def orthogonalize_cholesky(a):
    """Row-orthonormalize ``a`` as L^-1 A with L = chol(A A^T).

    Equivalent to Gram-Schmidt on the rows of A. Wide inputs get orthonormal
    rows; tall inputs are handled through the transpose (orthonormal columns).
    """
    rows, cols = ad.value_of(a).shape
    if rows > cols:
        return ad.transpose(orthogonalize_cholesky(ad.transpose(a)))
    if not isinstance(a, ad.Var):
        try:
            return orthonormalize_rows(a)
        except NotPositiveDefinite as exc:
            raise RankDeficient("matrix is numerically rank deficient") from exc
    try:
        chol = ad.cholesky(a @ ad.transpose(a))
    except NotPositiveDefinite as exc:
        raise RankDeficient("matrix is numerically rank deficient") from exc
    return ad.solve_triangular(chol, a)


def orthogonalize_lot(v, newton_iters=60, tol=1e-12):
    """(V V^T)^-1/2 V via the coupled Newton-Schulz iteration.

    V V^T is pre-scaled by its Frobenius norm. Iteration stops early once
    ||Z Y - I||_F <= tol; raises NonConvergence if the result is still more than
    1e-4 from orthogonal.
    """
    val = ad.value_of(v)
    n = val.shape[0]
    if val.shape != (n, n):
        raise ShapeMismatch(f"orthogonalize_lot needs a square matrix, got {val.shape}")
    eye = np.eye(n)
    m = v @ ad.transpose(v)
    c = float(np.linalg.norm(ad.value_of(m)))
    if c == 0.0:
        raise NonConvergence("zero matrix cannot be orthogonalized")
    y = m * (1.0 / c)
    z = eye
    for _ in range(newton_iters):
        zy = z @ y
        if np.linalg.norm(ad.value_of(zy) - eye) <= tol:
            break
        t = (3.0 * eye - zy) * 0.5
        y = y @ t
        z = t @ z
    w = (z @ v) * (1.0 / math.sqrt(c))
    wv = ad.value_of(w)
    if not np.isfinite(wv).all() or np.linalg.norm(wv.T @ wv - eye) > 1e-4:
        raise NonConvergence("Newton-Schulz iteration did not reach an orthogonal matrix")
    return w


def pad_core(core, out_dim, in_dim):
    """Embed a k x k orthogonal core into an out x in semi-orthogonal matrix."""
    k = ad.value_of(core).shape[0]
    if in_dim > k:
        core = ad.concat([core, np.zeros((k, in_dim - k))], axis=1)
    if out_dim > k:
        core = ad.concat([core, np.zeros((out_dim - k, in_dim))], axis=0)
    return core


def aol_weight(v, exponent=-0.5):
    """V diag(sum_j |V^T V|_ij)^exponent; zero column sums get scale 0."""
    gram = ad.abs(ad.transpose(v) @ v)
    d = ad.safe_pow(ad.sum(gram, axis=1), exponent)
    return v * d


def minmax(x, axis=-1):
    return ad.minmax(x, axis=axis)


def sandwich_factors(raw, n_out):
    """Split a column-orthonormal rectangular-Cayley matrix into (A^T, B^T).

    ``raw`` is (n_out + n_in, h); the top h x h block X and the rest Y give
    Z = X - X^T + Y^T Y and Q = [(I+Z)^-1 (I-Z); -2 Y (I+Z)^-1], Q^T Q = I.
    With A^T = Q[:n_out] and B^T = Q[n_out:], A A^T + B B^T = I, hence
    ||2 A^T B|| <= 1.
    """
    rv = ad.value_of(raw)
    h = rv.shape[1]
    if rv.shape[0] < h:
        raise ShapeMismatch("sandwich needs n_in + n_out >= hidden width")
    eye = np.eye(h)
    x = raw[:h]
    z = x - ad.transpose(x)
    if rv.shape[0] > h:
        y = raw[h:]
        z = z + ad.transpose(y) @ y
    q_top = ad.solve_general(eye + z, eye - z)
    if rv.shape[0] > h:
        inv_t = ad.solve_general(ad.transpose(eye + z), ad.transpose(y))  # (I+Z)^-T Y^T
        q = ad.concat([q_top, ad.transpose(inv_t) * -2.0], axis=0)
    else:
        q = q_top
    return q[:n_out], q[n_out:]


def _activation(name, x, axis=-1):
    if name == "relu":
        return ad.relu(x)
    if name == "minmax":
        return ad.minmax(x, axis=axis)
    raise ValueError(f"unknown activation {name!r}")


# -- layer descriptions ---------------------------------------------------------

@dataclass
class LayerSpec:
    kind: str
    in_shape: tuple
    out_shape: tuple
    role: str = "backbone"
    hyper: dict = field(default_factory=dict)


REGISTRY: dict[str, type] = {}


def register(cls):
    REGISTRY[cls.kind] = cls
    return cls


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def _orthogonal(rng, rows, cols):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


class Layer:
    """Base layer: raw parameters plus cached derived state.

    Subclasses implement ``forward(x, p)`` where ``p`` maps parameter names to
    arrays or Vars; GloRo-controlled layers also keep power-iteration state.
    """

    kind = "layer"

    def __init__(self, in_shape, out_shape, role="backbone"):
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.role = role
        self.params: dict[str, np.ndarray] = {}

    def hyper(self) -> dict:
        return {}

    def spec(self) -> LayerSpec:
        return LayerSpec(self.kind, self.in_shape, self.out_shape, self.role, self.hyper())

    def init_params(self, rng):
        pass

    def forward(self, x, p=None):
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _p(self, p):
        return self.params if p is None else p

    def bound_term(self, p):
        """Differentiable Lipschitz bound for the training loss (None means 1)."""
        return None

    def refresh(self, max_iters=TRAIN_ITERS, tol=0.0):
        """Advance power-iteration state using the current parameters."""

    def lipschitz(self, converge=True) -> float:
        return 1.0

    def _check_input(self, x):
        shape = tuple(ad.value_of(x).shape[1:])
        if shape != self.in_shape:
            raise ShapeMismatch(f"{self.kind}: expected input {self.in_shape}, got {shape}")

    def __repr__(self):
        return f"{type(self).__name__}({self.in_shape} -> {self.out_shape}, role={self.role})"


class _PowerIterated(Layer):
    """Layers whose bound is the spectral norm of a linear operator A."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        self.states: list[SpectralEstimate] = []

    def operators(self):
        """[(apply, apply_transpose, op_in_shape, op_out_shape)] from current params."""
        raise NotImplementedError

    def operator_var(self, p, i, v):
        """A_i v for the i-th operator, differentiable in ``p``."""
        raise NotImplementedError

    def _ensure_states(self, ops):
        if len(self.states) != len(ops):
            rng = np.random.default_rng(len(ops))
            self.states = [SpectralEstimate.fresh(o[2], o[3], rng) for o in ops]

    def refresh(self, max_iters=TRAIN_ITERS, tol=0.0):
        ops = self.operators()
        self._ensure_states(ops)
        for (apply, apply_t, _, _), st in zip(ops, self.states):
            power_iteration(apply, apply_t, st, max_iters=max_iters, tol=tol)

    def bound_term(self, p):
        ops = self.operators()
        self._ensure_states(ops)
        terms = []
        for i, ((apply, _, _, _), st) in enumerate(zip(ops, self.states)):
            av = np.asarray(apply(st.v))
            nrm = np.linalg.norm(av)
            u = av / nrm if nrm > 0 else st.u
            terms.append(ad.sum(self.operator_var(p, i, st.v) * u))
        if len(terms) == 1:
            return terms[0]
        return ad.max(ad.concat([ad.reshape(t, (1,)) for t in terms]), axis=0)

    def lipschitz(self, converge=True) -> float:
        if converge:
            self.refresh(max_iters=CERT_MAX_ITERS, tol=CERT_TOL)
        else:
            self._ensure_states(self.operators())
        out = []
        for (apply, _, _, _), st in zip(self.operators(), self.states):
            out.append(float(np.linalg.norm(apply(st.v))))
        return max(out)


def _dense_ops(w):
    return [(lambda v: w @ v, lambda u: w.T @ u, (w.shape[1],), (w.shape[0],))]


@register
class DenseGloRo(_PowerIterated):
    """Unconstrained dense layer; bound = ||W||_2 by power iteration."""

    kind = "dense_gloro"

    def __init__(self, n_in, n_out, role="dense"):
        super().__init__((n_in,), (n_out,), role)

    def hyper(self):
        return {"n_in": self.in_shape[0], "n_out": self.out_shape[0]}

    def init_params(self, rng):
        self.params = {"W": _orthogonal(rng, self.out_shape[0], self.in_shape[0]),
                       "b": np.zeros(self.out_shape[0])}

    def weight(self, p=None):
        return self._p(p)["W"]

    def forward(self, x, p=None):
        p = self._p(p)
        self._check_input(x)
        return x @ ad.transpose(self.weight(p)) + p["b"]

    def operators(self):
        return _dense_ops(np.asarray(self.weight()))

    def operator_var(self, p, i, v):
        return ad.reshape(self.weight(p) @ v.reshape(-1, 1), (-1,))


@register
class ResidualDenseGloRo(DenseGloRo):
    """(W + I) x + b; bound from power iteration on W + I directly."""

    kind = "residual_dense_gloro"

    def __init__(self, n, role="dense"):
        _PowerIterated.__init__(self, (n,), (n,), role)

    def hyper(self):
        return {"n": self.in_shape[0]}

    def init_params(self, rng):
        n = self.in_shape[0]
        self.params = {"W": _uniform(rng, (n, n), 1 / math.sqrt(n)), "b": np.zeros(n)}

    def weight(self, p=None):
        return self._p(p)["W"] + np.eye(self.in_shape[0])


@register
class Head(DenseGloRo):
    """Classification head; rows w_j feed pairwise (tight) certification."""

    kind = "head"

    def __init__(self, n_in, n_classes, role="head"):
        super().__init__(n_in, n_classes, role)

    def hyper(self):
        return {"n_in": self.in_shape[0], "n_classes": self.out_shape[0]}

    def init_params(self, rng):
        self.params = {"W": _uniform(rng, (self.out_shape[0], self.in_shape[0]),
                                     1 / math.sqrt(self.in_shape[0])),
                       "b": np.zeros(self.out_shape[0])}


class _OrthoDense(Layer):
    """Dense layer whose effective weight is orthogonal (bound exactly 1)."""

    def __init__(self, n_in, n_out=None, role="dense"):
        n_out = n_in if n_out is None else n_out
        super().__init__((n_in,), (n_out,), role)

    def hyper(self):
        return {"n_in": self.in_shape[0], "n_out": self.out_shape[0]}

    def init_params(self, rng):
        k = min(self.in_shape[0], self.out_shape[0])
        self.params = {"V": _uniform(rng, (k, k), 1 / math.sqrt(k)),
                       "b": np.zeros(self.out_shape[0])}

    def core(self, v):
        raise NotImplementedError

    def weight(self, p=None):
        p = self._p(p)
        return pad_core(self.core(p["V"]), self.out_shape[0], self.in_shape[0])

    def forward(self, x, p=None):
        p = self._p(p)
        self._check_input(x)
        return x @ ad.transpose(self.weight(p)) + p["b"]


@register
class CayleyDense(_OrthoDense):
    kind = "dense_cayley"

    def core(self, v):
        return orthogonalize_cayley(v)


@register
class MatExpDense(_OrthoDense):
    kind = "dense_matexp"

    def core(self, v):
        return orthogonalize_matexp(v)


@register
class LOTDense(_OrthoDense):
    kind = "dense_lot"

    def __init__(self, n_in, n_out=None, role="dense", newton_iters=60):
        super().__init__(n_in, n_out, role)
        self.newton_iters = newton_iters

    def hyper(self):
        return {**super().hyper(), "newton_iters": self.newton_iters}

    def init_params(self, rng):
        super().init_params(rng)
        self.params["V"] += np.eye(self.params["V"].shape[0])

    def core(self, v):
        return orthogonalize_lot(v, self.newton_iters)


@register
class CholeskyResidualDense(_OrthoDense):
    """W = cholesky-orthogonalize(I + V); f(x) = W x + b."""

    kind = "dense_cholesky_residual"

    def __init__(self, n, role="dense"):
        super().__init__(n, n, role)

    def hyper(self):
        return {"n": self.in_shape[0]}

    def core(self, v):
        return orthogonalize_cholesky(v + np.eye(self.in_shape[0]))


@register
class CholeskyDense(_OrthoDense):
    """Rectangular cholesky-orthogonalized dense layer (used as the neck)."""

    kind = "dense_cholesky"

    def init_params(self, rng):
        n_in, n_out = self.in_shape[0], self.out_shape[0]
        self.params = {"V": rng.standard_normal((n_out, n_in)) / math.sqrt(n_in),
                       "b": np.zeros(n_out)}

    def weight(self, p=None):
        return orthogonalize_cholesky(self._p(p)["V"])


@register
class AOLDense(Layer):
    """Almost-orthogonal layer V diag(sum_j |V^T V|_ij)^exponent."""

    kind = "aol"

    def __init__(self, n_in, n_out=None, role="dense", exponent=-0.5):
        n_out = n_in if n_out is None else n_out
        super().__init__((n_in,), (n_out,), role)
        if exponent not in (-1, -1.0, -0.5):
            raise ValueError("AOL exponent must be -1 or -1/2")
        self.exponent = float(exponent)

    def hyper(self):
        return {"n_in": self.in_shape[0], "n_out": self.out_shape[0], "exponent": self.exponent}

    def init_params(self, rng):
        self.params = {"V": _orthogonal(rng, self.out_shape[0], self.in_shape[0]),
                       "b": np.zeros(self.out_shape[0])}

    def weight(self, p=None):
        return aol_weight(self._p(p)["V"], self.exponent)

    def forward(self, x, p=None):
        p = self._p(p)
        self._check_input(x)
        w = self.weight(p)
        if CHECKS and not isinstance(w, ad.Var):
            assert spectral_norm_oracle(w) <= self.lipschitz() + 1e-6, "AOL spectral check failed"
        return x @ ad.transpose(w) + p["b"]

    def lipschitz(self, converge=True):
        if self.exponent == -0.5:
            return 1.0
        # V D^-1 = (V D^-1/2) D^-1/2 and ||V D^-1/2|| <= 1.
        v = self.params["V"]
        r = np.abs(v.T @ v).sum(axis=1)
        r = r[r > 0]
        return max(1.0, float(r.min() ** -0.5)) if r.size else 1.0


@register
class SLLBlock(Layer):
    """x - 2 W T^-1 relu(W^T x + b), T_ii = sum_j |W^T W|_ij q_j / q_i."""

    kind = "sll"

    def __init__(self, n, hidden=None, role="dense", activation="relu"):
        super().__init__((n,), (n,), role)
        if activation != "relu":
            raise ValueError("SLL needs an elementwise slope-restricted activation (relu)")
        self.hidden = n if hidden is None else hidden
        self.activation = activation

    def hyper(self):
        return {"n": self.in_shape[0], "hidden": self.hidden, "activation": self.activation}

    def init_params(self, rng):
        n = self.in_shape[0]
        self.params = {"W": _uniform(rng, (n, self.hidden), 1 / math.sqrt(n)),
                       "q_log": np.zeros(self.hidden), "b": np.zeros(self.hidden)}

    def scales(self, p=None):
        p = self._p(p)
        w = p["W"]
        q = ad.exp(p["q_log"])
        t = ad.reshape(ad.abs(ad.transpose(w) @ w) @ ad.reshape(q, (-1, 1)), (-1,)) / q
        return ad.safe_pow(t, -1.0)

    def forward(self, x, p=None):
        p = self._p(p)
        self._check_input(x)
        w = p["W"]
        h = _activation(self.activation, x @ w + p["b"])
        return x - (h * self.scales(p)) @ ad.transpose(w) * 2.0


@register
class SandwichBlock(Layer):
    """sqrt(2) A^T Psi act(Psi^-1 B x + b) with ||2 A^T B|| <= 1."""

    kind = "sandwich"

    def __init__(self, n_in, n_out=None, hidden=None, role="dense", activation="relu"):
        n_out = n_in if n_out is None else n_out
        super().__init__((n_in,), (n_out,), role)
        self.hidden = n_in if hidden is None else hidden
        self.activation = activation
        if activation == "minmax" and self.hidden % 2:
            raise OddWidth("sandwich with minmax needs an even hidden width")

    def hyper(self):
        return {"n_in": self.in_shape[0], "n_out": self.out_shape[0],
                "hidden": self.hidden, "activation": self.activation}

    def init_params(self, rng):
        rows = self.in_shape[0] + self.out_shape[0]
        self.params = {"R": _uniform(rng, (rows, self.hidden), 1 / math.sqrt(self.hidden)),
                       "psi": np.zeros(self.hidden), "b": np.zeros(self.hidden)}

    def factors(self, p=None):
        """(A^T, B^T): shapes (n_out, h) and (n_in, h)."""
        return sandwich_factors(self._p(p)["R"], self.out_shape[0])

    def forward(self, x, p=None):
        p = self._p(p)
        self._check_input(x)
        at, bt = self.factors(p)
        if CHECKS and not isinstance(at, ad.Var):
            assert spectral_norm_oracle(2.0 * at @ bt.T) <= 1 + 1e-6, "sandwich check failed"
        psi = ad.exp(p["psi"])
        z = (x @ bt) * ad.exp(ad.neg(p["psi"]))
        h = _activation(self.activation, z + p["b"]) * psi
        return (h @ ad.transpose(at)) * math.sqrt(2.0)

    def lipschitz(self, converge=True):
        if self.activation == "relu":
            return 1.0
        # a pair permutation does not commute with Psi: ||Psi P Psi^-1|| <= max/min
        psi = np.exp(self.params["psi"])
        return math.sqrt(2.0) * float(psi.max() / psi.min())


@register
class MinMax(Layer):
    """Pairwise (min, max) sort along the feature/channel axis."""

    kind = "minmax"

    def __init__(self, shape, role="activation"):
        super().__init__(shape, shape, role)
        if self.in_shape[0] % 2:
            raise OddWidth(f"minmax needs an even width, got {self.in_shape[0]}")

    def hyper(self):
        return {"shape": list(self.in_shape)}

    def forward(self, x, p=None):
        self._check_input(x)
        return ad.minmax(x, axis=1)


@register
class Flatten(Layer):
    kind = "flatten"

    def __init__(self, shape, role="neck"):
        super().__init__(shape, (int(np.prod(shape)),), role)

    def hyper(self):
        return {"shape": list(self.in_shape)}

    def forward(self, x, p=None):
        self._check_input(x)
        return ad.reshape(x, (ad.value_of(x).shape[0], self.out_shape[0]))


@register
class ConvGloRo(_PowerIterated):
    """Stride-1 same-padded convolution; bound = operator norm at the input size."""

    kind = "conv_gloro"
    residual = False

    def __init__(self, c_in, c_out, size, kernel=3, role="stem"):
        super().__init__((c_in, size, size), (c_out, size, size), role)
        self.kernel = kernel

    def hyper(self):
        return {"c_in": self.in_shape[0], "c_out": self.out_shape[0],
                "size": self.in_shape[1], "kernel": self.kernel}

    def init_params(self, rng):
        c_in, c_out, k = self.in_shape[0], self.out_shape[0], self.kernel
        self.params = {"K": _uniform(rng, (c_out, c_in, k, k), 1 / math.sqrt(c_in * k * k)),
                       "b": np.zeros(c_out)}

    def forward(self, x, p=None):
        p = self._p(p)
        self._check_input(x)
        y = ad.conv2d(x, p["K"])
        if self.residual:
            y = x + y
        return y + ad.reshape(p["b"], (1, -1, 1, 1))

    def operators(self):
        kern = np.asarray(self.params["K"])
        res = self.residual

        def apply(v):
            y = ad.conv2d_value(v[None], kern)[0]
            return v + y if res else y

        def apply_t(u):
            y = ad.conv2d_transpose_value(u[None], kern)[0]
            return u + y if res else y

        return [(apply, apply_t, self.in_shape, self.out_shape)]

    def operator_var(self, p, i, v):
        y = ad.conv2d(v[None], p["K"])[0]
        return y + v if self.residual else y


@register
class LiResNetBlock(ConvGloRo):
    """x + conv(x) + b."""

    kind = "liresnet_block"
    residual = True

    def __init__(self, channels, size, kernel=3, role="backbone"):
        super().__init__(channels, channels, size, kernel, role)

    def hyper(self):
        return {"channels": self.in_shape[0], "size": self.in_shape[1], "kernel": self.kernel}


@register
class SpatialMLP(_PowerIterated):
    """Grouped residual mixing over flattened spatial positions.

    Channel c uses group k = floor(c G / C); bound = max_k ||I + W_k||_2.
    """

    kind = "spatial_mlp"

    def __init__(self, channels, size, groups=1, role="backbone"):
        super().__init__((channels, size, size), (channels, size, size), role)
        if channels % groups:
            raise ShapeMismatch("channel count must be divisible by the group count")
        self.groups = groups

    def hyper(self):
        return {"channels": self.in_shape[0], "size": self.in_shape[1], "groups": self.groups}

    def init_params(self, rng):
        s2 = self.in_shape[1] ** 2
        self.params = {"W": _uniform(rng, (self.groups, s2, s2), 0.1 / s2),
                       "b": np.zeros(self.in_shape[0])}

    def forward(self, x, p=None):
        p = self._p(p)
        self._check_input(x)
        c, s, _ = self.in_shape
        batch = ad.value_of(x).shape[0]
        per = c // self.groups
        flat = ad.reshape(x, (batch, c, s * s))
        outs = []
        for k in range(self.groups):
            chunk = ad.reshape(flat[:, k * per:(k + 1) * per], (batch * per, s * s))
            mixed = chunk @ ad.transpose(p["W"][k])
            outs.append(ad.reshape(mixed, (batch, per, s * s)))
        mixed = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        y = flat + mixed + ad.reshape(p["b"], (1, c, 1))
        return ad.reshape(y, (batch, c, s, s))

    def operators(self):
        s2 = self.in_shape[1] ** 2
        ops = []
        for k in range(self.groups):
            m = np.eye(s2) + np.asarray(self.params["W"][k])
            ops.append((lambda v, m=m: m @ v, lambda u, m=m: m.T @ u, (s2,), (s2,)))
        return ops

    def operator_var(self, p, i, v):
        return ad.reshape((p["W"][i] + np.eye(v.shape[0])) @ v.reshape(-1, 1), (-1,))


def spatial_mlp(x, weights, bias=None):
    """Functional grouped spatial-MLP: x (C,S,S) or (B,C,S,S), weights (G,S^2,S^2)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    weights = np.asarray(weights, dtype=np.float64)
    layer = SpatialMLP(xb.shape[1], xb.shape[2], groups=weights.shape[0])
    layer.params = {"W": weights,
                    "b": np.zeros(xb.shape[1]) if bias is None else np.asarray(bias, float)}
    y = layer.forward(xb)
    return y[0] if single else y


MECHANISMS = {
    "gloro": "dense_gloro",
    "residual_gloro": "residual_dense_gloro",
    "cayley": "dense_cayley",
    "matexp": "dense_matexp",
    "cholesky_residual": "dense_cholesky_residual",
    "lot": "dense_lot",
    "aol": "aol",
    "sll": "sll",
    "sandwich": "sandwich",
}


def normalize_mechanism(name: str) -> str:
    key = name.strip().lower().replace("-", "_")
    aliases = {"gloro_regularized": "gloro", "cholesky": "cholesky_residual", "exp": "matexp"}
    key = aliases.get(key, key)
    if key not in MECHANISMS:
        raise ValueError(f"unknown dense mechanism {name!r}; choose from {sorted(MECHANISMS)}")
    return key


def dense_layer(mechanism: str, width: int, role="dense") -> Layer:
    """Square width x width dense layer using the named Lipschitz-control mechanism."""
    kind = MECHANISMS[normalize_mechanism(mechanism)]
    cls = REGISTRY[kind]
    if kind in ("dense_cholesky_residual", "residual_dense_gloro", "sll"):
        return cls(width, role=role)
    return cls(width, width, role=role)


def from_spec(spec: LayerSpec) -> Layer:
    """Rebuild an (uninitialized) layer from its spec."""
    cls = REGISTRY[spec.kind]
    h = dict(spec.hyper)
    if cls is MinMax or cls is Flatten:
        return cls(tuple(h["shape"]), role=spec.role)
    return cls(**h, role=spec.role)
