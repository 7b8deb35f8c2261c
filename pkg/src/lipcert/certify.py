"""Deterministic Lipschitz-margin certification, VRA and an l2 PGD attacker."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyDataset
from .network import Network, network_lipschitz
from .parallel import map_ordered

SQRT2 = math.sqrt(2.0)


@dataclass
class CertResult:
    predicted: int
    margin: float
    certified_radius: float
    certified_at: bool
    method: str


@dataclass
class AttackResult:
    success: bool
    adversarial: np.ndarray
    norm: float


def _top_two(logits):
    logits = np.asarray(logits, dtype=np.float64)
    j = int(np.argmax(logits))
    others = np.delete(logits, j)
    runner = float(others.max()) if others.size else -math.inf
    return j, float(logits[j]) - runner


def certify_naive(logits, k, epsilon) -> CertResult:
    """Certify with a global bound ``k`` on the full network (head included)."""
    logits = np.asarray(logits, dtype=np.float64)
    j, margin = _top_two(logits)
    others = np.delete(logits, j)
    certified = bool(np.all(logits[j] - SQRT2 * k * epsilon > others))
    radius = max(margin, 0.0) / (SQRT2 * k)
    return CertResult(j, margin, radius, certified, "naive")


def _pairwise(feats_or_logits, head_rows, k_backbone):
    """Per-class (margin f_j - f_i, pairwise bound K_ji) for one point."""
    f = np.asarray(feats_or_logits, dtype=np.float64)
    w = np.asarray(head_rows, dtype=np.float64)
    j = int(np.argmax(f))
    diffs = f[j] - f
    kji = k_backbone * np.linalg.norm(w[j] - w, axis=1)
    return j, diffs, kji


def _tight_radius(diffs, kji, j):
    mask = np.ones(len(diffs), dtype=bool)
    mask[j] = False
    d, k = diffs[mask], kji[mask]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(k > 0, d / np.where(k > 0, k, 1.0), np.where(d > 0, np.inf, 0.0))
    return float(max(r.min(), 0.0)) if r.size else math.inf


def certify_tight(penultimate, head_rows, head_bias, k_backbone, epsilon) -> CertResult:
    """Pairwise certification: f_j - f_i > k_backbone ||w_j - w_i|| eps for all i != j."""
    w = np.asarray(head_rows, dtype=np.float64)
    logits = w @ np.asarray(penultimate, dtype=np.float64) + np.asarray(head_bias, dtype=np.float64)
    j, diffs, kji = _pairwise(logits, w, k_backbone)
    others = np.arange(len(logits)) != j
    certified = bool(np.all(logits[others] + kji[others] * epsilon < logits[j]))
    margin = float(diffs[others].min()) if others.any() else math.inf
    return CertResult(j, margin, _tight_radius(diffs, kji, j), certified, "tight")


# -- batched certification -----------------------------------------------------

@dataclass
class Certification:
    """Batched certificates for one dataset under one method."""

    predicted: np.ndarray
    margin: np.ndarray
    radius: np.ndarray
    logits: np.ndarray
    pairwise: np.ndarray | None  # (B, C) K_ji (tight) or None (naive)
    k: float
    method: str

    def certified_at(self, epsilon):
        if self.method == "naive":
            others = self.logits.copy()
            others[np.arange(len(others)), self.predicted] = -np.inf
            return np.all(self.logits[np.arange(len(others)), self.predicted][:, None]
                          - SQRT2 * self.k * epsilon > others, axis=1)
        thresh = self.logits + self.pairwise * epsilon
        thresh[np.arange(len(thresh)), self.predicted] = -np.inf
        return thresh.max(axis=1) < self.logits[np.arange(len(thresh)), self.predicted]

    def results(self, epsilon):
        flags = self.certified_at(epsilon)
        return [CertResult(int(p), float(m), float(r), bool(c), self.method)
                for p, m, r, c in zip(self.predicted, self.margin, self.radius, flags)]


def certify_batch(net: Network, x, method="tight", converge=True, batch_size=512,
                  workers=1) -> Certification:
    """Certify every row of ``x``; bounds are re-converged first unless told otherwise.

    Feature extraction runs over fixed chunks of ``batch_size`` rows, on up to
    ``workers`` threads.
    """
    if method not in ("naive", "tight"):
        raise ValueError(f"unknown certification method {method!r}")
    x = np.asarray(x, dtype=np.float64)
    net.check_input(x)
    report = network_lipschitz(net, converge=converge)
    chunks = [x[i:i + batch_size] for i in range(0, len(x), batch_size)]
    feats = np.concatenate(map_ordered(net.features, chunks, workers)) if len(x) else \
        np.zeros((0,) + net.head.in_shape)
    w, b = net.head.params["W"], net.head.params["b"]
    logits = feats @ w.T + b
    pred = np.argmax(logits, axis=1) if len(x) else np.zeros(0, dtype=int)
    rows = np.arange(len(x))
    others = logits.copy()
    others[rows, pred] = -np.inf
    margin = logits[rows, pred] - others.max(axis=1) if len(x) else np.zeros(0)
    if method == "naive":
        k = report.total
        radius = np.maximum(margin, 0.0) / (SQRT2 * k)
        return Certification(pred, margin, radius, logits, None, k, "naive")
    k = report.backbone_product
    pairwise = k * np.linalg.norm(w[pred][:, None, :] - w[None, :, :], axis=2)
    diffs = logits[rows, pred][:, None] - logits
    radius = np.array([_tight_radius(diffs[i], pairwise[i], pred[i]) for i in rows])
    return Certification(pred, margin, radius, logits, pairwise, k, "tight")


def vra(net: Network, x, y, epsilon, method="tight") -> float:
    """Fraction of points that are both correctly classified and certified at ``epsilon``."""
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyDataset("cannot compute VRA on an empty dataset")
    cert = certify_batch(net, x, method)
    return float(np.mean((cert.predicted == y) & cert.certified_at(epsilon)))


def vra_grid(net: Network, x, y, epsilons, method="tight"):
    """(clean accuracy, [VRA per epsilon]) with a single bound refresh."""
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyDataset("cannot compute VRA on an empty dataset")
    cert = certify_batch(net, x, method)
    correct = cert.predicted == y
    return float(correct.mean()), [float(np.mean(correct & cert.certified_at(e))) for e in epsilons]


# -- attack ---------------------------------------------------------------------

def _margin_grad(model, x, labels):
    tape = ad.Tape()
    xv = tape.input(x, name="x")
    logits = model(xv)
    lv = ad.value_of(logits)
    rows = np.arange(len(x))
    mask = np.zeros_like(lv)
    mask[rows, labels] = -np.inf
    loss = ad.sum(ad.max(logits + mask, axis=1) - logits[rows, labels])
    grad = ad.backward(loss)["x"]
    return lv, grad


def _project(delta, eps):
    flat = delta.reshape(len(delta), -1)
    norms = np.linalg.norm(flat, axis=1)
    scale = np.where(norms > eps, eps / np.maximum(norms, 1e-300), 1.0)
    return delta * scale.reshape((-1,) + (1,) * (delta.ndim - 1))


def pgd_attack_batch(model, x, labels, epsilon, steps=100, restarts=5, rng=None,
                     clip=(0.0, 1.0)) -> list[AttackResult]:
    """l2 PGD on the margin loss max_{i != y} f_i - f_y.

    Step size 2.5 * eps / steps, uniform random start in the eps-ball for each
    restart, iterates clamped to ``clip`` (None disables clamping).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x0 = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(x0)
    dims = int(np.prod(x0.shape[1:]))
    best = x0.copy()
    found = np.argmax(ad.value_of(model(x0)), axis=1) != labels

    def clamp(z):
        return z if clip is None else np.clip(z, clip[0], clip[1])

    if epsilon > 0 and steps > 0:
        alpha = 2.5 * epsilon / steps
        for _ in range(restarts):
            todo = np.flatnonzero(~found)
            if todo.size == 0:
                break
            base = x0[todo]
            lab = labels[todo]
            direction = rng.standard_normal(base.shape)
            dn = np.linalg.norm(direction.reshape(len(todo), -1), axis=1)
            radius = epsilon * rng.uniform(size=len(todo)) ** (1.0 / dims)
            direction *= (radius / dn).reshape((-1,) + (1,) * (base.ndim - 1))
            xa = clamp(base + direction)
            hit = np.zeros(len(todo), dtype=bool)
            for step in range(steps + 1):
                logits, grad = _margin_grad(model, xa, lab)
                new = (np.argmax(logits, axis=1) != lab) & ~hit
                if new.any():
                    best[todo[new]] = xa[new]
                    hit |= new
                if step == steps or hit.all():
                    break
                gn = np.linalg.norm(grad.reshape(len(todo), -1), axis=1)
                gn = np.where(gn > 0, gn, 1.0).reshape((-1,) + (1,) * (base.ndim - 1))
                xa = clamp(base + _project(xa + alpha * grad / gn - base, epsilon))
            found[todo[hit]] = True
    norms = np.linalg.norm((best - x0).reshape(n, -1), axis=1)
    return [AttackResult(bool(found[i]), best[i], float(norms[i])) for i in range(n)]


def pgd_attack(model, x, label, epsilon, steps=100, restarts=5, rng=None, clip=(0.0, 1.0)):
    """Attack a single input; see :func:`pgd_attack_batch`."""
    x = np.asarray(x, dtype=np.float64)
    return pgd_attack_batch(model, x[None], [label], epsilon, steps, restarts, rng, clip)[0]
