"""Independent reference implementations used only by the tests.

None of these share code with the package: they are deliberately slow,
direct transcriptions of the underlying definitions.
"""
from __future__ import annotations

import numpy as np


def modified_gram_schmidt_rows(a):
    """Orthonormalize the rows of ``a`` in order (modified Gram-Schmidt)."""
    q = np.array(a, dtype=np.float64)
    for i in range(q.shape[0]):
        for j in range(i):
            q[i] -= (q[i] @ q[j]) * q[j]
        q[i] /= np.linalg.norm(q[i])
    return q


def conv_matrix(kernel, size):
    """Dense matrix of the zero-padded, stride-1 'same' convolution (cross-correlation).

    ``kernel`` has shape (c_out, c_in, k, k); the matrix acts on inputs
    flattened in (channel, row, col) order.
    """
    c_out, c_in, k, _ = kernel.shape
    pad = k // 2
    n_in, n_out = c_in * size * size, c_out * size * size
    m = np.zeros((n_out, n_in))
    for o in range(c_out):
        for r in range(size):
            for c in range(size):
                row = (o * size + r) * size + c
                for i in range(c_in):
                    for dr in range(k):
                        for dc in range(k):
                            rr, cc = r + dr - pad, c + dc - pad
                            if 0 <= rr < size and 0 <= cc < size:
                                m[row, (i * size + rr) * size + cc] += kernel[o, i, dr, dc]
    return m


def numeric_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of a vector function at ``x`` (flattened)."""
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(f(x)).reshape(-1)
    jac = np.zeros((y0.size, x.size))
    flat = x.reshape(-1)
    for i in range(x.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(f(xp.reshape(x.shape))).reshape(-1)
                     - np.asarray(f(xm.reshape(x.shape))).reshape(-1)) / (2 * h)
    return jac


def svd_norm(a):
    """Largest singular value via LAPACK SVD, an oracle independent of power iteration."""
    return float(np.linalg.svd(np.asarray(a, dtype=np.float64), compute_uv=False)[0])


def pairwise_radius(logits, head_rows, k_backbone):
    """Tight certified radius by direct enumeration over competitor classes."""
    j = int(np.argmax(logits))
    best = np.inf
    for i in range(len(logits)):
        if i == j:
            continue
        kji = k_backbone * np.linalg.norm(head_rows[j] - head_rows[i])
        gap = logits[j] - logits[i]
        r = gap / kji if kji > 0 else (np.inf if gap > 0 else 0.0)
        best = min(best, r)
    return max(best, 0.0)


def sorted_pairs(x):
    """MinMax reference: sort each adjacent pair (x0, x1) -> (min, max)."""
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    a, b = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = np.minimum(a, b)
    out[..., 1::2] = np.maximum(a, b)
    return out
