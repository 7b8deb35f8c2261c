"""Certification-aware (GloRo-style) training and the dense-mechanism ablation."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from .certify import SQRT2, certify_batch
from .data import MixSpec, Pool, mix_batch
from .errors import DivergedLoss
from .network import Network, network_lipschitz

EPS_GRID = (0.0, 36 / 255, 72 / 255, 108 / 255)


@dataclass
class TrainConfig:
    epsilon_train: float = 108 / 255
    epochs: int = 10
    mix: MixSpec = field(default_factory=MixSpec)
    lr: float | None = None  # None: 0.1 * batch / 256
    momentum: float = 0.9
    ramp: float = 0.5
    method: str = "tight"
    seed: int = 0
    eval_eps: tuple = EPS_GRID
    steps_per_epoch: int | None = None  # None: one pass over the real pool
    record_time: bool = True

    def __post_init__(self):
        if self.epsilon_train < 0:
            raise ValueError("epsilon_train must be non-negative")
        if not 0 <= self.ramp <= 1:
            raise ValueError("ramp fraction must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")
        if self.method not in ("naive", "tight"):
            raise ValueError(f"unknown certification method {self.method!r}")

    @property
    def learning_rate(self):
        return 0.1 * self.mix.batch_size / 256 if self.lr is None else self.lr


@dataclass
class TrainLog:
    eps: tuple
    records: list = field(default_factory=list)

    def columns(self):
        return (["epoch", "clean_acc"] + [f"vra@{_fmt_eps(e)}" for e in self.eps]
                + ["loss", "lip_product", "seconds"])

    def append(self, epoch, clean, vras, loss, lip, seconds):
        self.records.append({"epoch": epoch, "clean_acc": clean, "vra": list(vras),
                             "loss": loss, "lip_product": lip, "seconds": seconds})

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for r in self.records:
            w.writerow([r["epoch"], repr(r["clean_acc"])] + [repr(v) for v in r["vra"]]
                       + [repr(r["loss"]), repr(r["lip_product"]), repr(r["seconds"])])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def _fmt_eps(e):
    frac = Fraction(e).limit_denominator(1000)
    if abs(float(frac) - e) < 1e-12 and frac.denominator != 1:
        return f"{frac.numerator}/{frac.denominator}"
    return repr(float(e))


# -- loss pieces ---------------------------------------------------------------

def pairwise_bounds(head_w, k_backbone, predicted):
    """K_ji = k_backbone * ||w_j - w_i|| for each row's predicted class j; shape (B, C)."""
    predicted = np.asarray(predicted, dtype=np.int64)
    diff = ad.getitem(head_w, predicted).reshape((len(predicted), 1, -1)) \
        - ad.reshape(head_w, (1,) + tuple(ad.value_of(head_w).shape))
    return ad.safe_sqrt(ad.sum(diff * diff, axis=2)) * k_backbone


def gloro_augmented_logits(logits, bounds, epsilon):
    """Append the bottom logit max_{i != j} (f_i + K_ji eps), j = argmax.

    ``bounds`` is either a (B, C) array of pairwise K_ji or a scalar global
    bound k, in which case every K_ji is sqrt(2) k.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    lv = np.asarray(ad.value_of(logits), dtype=np.float64)
    squeeze = lv.ndim == 1
    if squeeze:
        logits = ad.reshape(logits, (1, -1)) if isinstance(logits, ad.Var) else lv[None]
        lv = lv[None]
    bv = ad.value_of(bounds)
    if np.ndim(bv) == 0:
        shifted = logits + bounds * (SQRT2 * epsilon)
    else:
        if squeeze and np.ndim(bv) == 1:
            bounds = ad.reshape(bounds, (1, -1)) if isinstance(bounds, ad.Var) else bv[None]
        shifted = logits + bounds * epsilon
    pred = np.argmax(lv, axis=1)
    mask = np.zeros_like(lv)
    mask[np.arange(len(lv)), pred] = -np.inf
    bot = ad.max(shifted + mask, axis=1)
    out = ad.concat([logits, ad.reshape(bot, (-1, 1))], axis=1)
    return ad.reshape(out, (-1,)) if squeeze else out


def gloro_loss(extended, labels):
    """Cross-entropy over the C + 1 extended logits; the bottom class is never a label."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if ad.value_of(extended).ndim == 1:
        extended = ad.reshape(extended, (1, -1))
    return ad.softmax_cross_entropy(extended, labels)


loss = gloro_loss


def eps_schedule(epoch, config: TrainConfig):
    """Linear ramp from 0 to epsilon_train over the first ``ramp`` fraction of epochs."""
    if not 0 <= epoch < config.epochs:
        raise ValueError("epoch out of range")
    ramp_epochs = config.ramp * (config.epochs - 1)
    if ramp_epochs <= 0:
        return config.epsilon_train
    return config.epsilon_train * min(1.0, epoch / ramp_epochs)


def network_gloro_loss(net: Network, params, x, y, epsilon, method="tight"):
    """Loss graph for one batch; ``params`` are the tape-bound per-layer Vars."""
    logits = net.forward(x, params)
    k = net.backbone_bound_term(params)
    head_p = params[-1]
    if method == "tight":
        bounds = pairwise_bounds(head_p["W"], k, np.argmax(ad.value_of(logits), axis=1))
    else:
        bounds = k * net.head.bound_term(head_p)
    return gloro_loss(gloro_augmented_logits(logits, bounds, epsilon), y)


# -- loop -----------------------------------------------------------------------

class SGD:
    """SGD with heavy-ball momentum."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, net: Network, grads: dict, lr):
        for key, value in net.named_params():
            g = grads.get(key)
            if g is None:
                continue
            v = self.momentum * self.velocity.get(key, 0.0) + g
            self.velocity[key] = v
            net.set_param(key, value - lr * v)


def cosine_lr(base, step, total):
    return base * 0.5 * (1 + math.cos(math.pi * step / max(total, 1)))


def evaluate_epoch(net, x, y, eps_grid, method):
    cert = certify_batch(net, x, method, converge=True)
    correct = cert.predicted == np.asarray(y)
    vras = [float(np.mean(correct & cert.certified_at(e))) for e in eps_grid]
    lip = network_lipschitz(net, converge=False).backbone_product
    return float(correct.mean()), vras, lip


def train(net: Network, real: Pool, generated: Pool | None, config: TrainConfig,
          eval_data=None, verbose=False):
    """Train in place; returns (net, TrainLog).

    ``eval_data`` is an (x, y) pair for the per-epoch VRA rows; defaults to the
    real training pool.
    """
    net.check_input(real.x[:1])
    rng = np.random.default_rng(config.seed)
    ex, ey = (real.x, real.y) if eval_data is None else eval_data
    spec = config.mix
    steps = config.steps_per_epoch or max(1, math.ceil(len(real) / max(spec.n_real, 1)))
    total = steps * config.epochs
    opt = SGD(config.momentum)
    log = TrainLog(tuple(config.eval_eps))
    step = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        eps = eps_schedule(epoch, config)
        losses = []
        for _ in range(steps):
            batch = mix_batch(real, generated, spec, rng)
            net.refresh(max_iters=1)
            tape = ad.Tape()
            params = net.bind(tape)
            lv = network_gloro_loss(net, params, batch.x, batch.y, eps, config.method)
            value = float(ad.value_of(lv))
            if not math.isfinite(value):
                raise DivergedLoss(epoch, log)
            opt.step(net, ad.backward(lv).grads, cosine_lr(config.learning_rate, step, total))
            losses.append(value)
            step += 1
        clean, vras, lip = evaluate_epoch(net, ex, ey, config.eval_eps, config.method)
        seconds = time.perf_counter() - t0 if config.record_time else 0.0
        log.append(epoch, clean, vras, float(np.mean(losses)), lip, seconds)
        if verbose:
            print(f"epoch {epoch:3d} loss {np.mean(losses):.4f} clean {clean:.3f} "
                  f"vra {' '.join(f'{v:.3f}' for v in vras)} K {lip:.3f}", flush=True)
    return net, log


# -- ablation ---------------------------------------------------------------------

ABLATION_MECHANISMS = ("gloro", "cayley", "matexp", "cholesky_residual", "lot", "aol", "sll",
                       "sandwich")


@dataclass
class AblationRow:
    mechanism: str
    clean: float
    vra: list
    seconds_per_epoch: float


def ablate_dense_mechanism(build, real: Pool, generated: Pool | None, config: TrainConfig,
                           mechanisms=ABLATION_MECHANISMS, eval_data=None):
    """Train one model per dense mechanism with everything else held fixed.

    ``build(mechanism, rng)`` returns a fresh network; it receives an rng
    seeded identically for every mechanism.
    """
    rows = []
    for mech in mechanisms:
        net = build(mech, np.random.default_rng(config.seed))
        t0 = time.perf_counter()
        _, log = train(net, real, generated, config, eval_data)
        per_epoch = (time.perf_counter() - t0) / config.epochs if config.record_time else 0.0
        last = log.final
        rows.append(AblationRow(mech, last["clean_acc"], list(last["vra"]), per_epoch))
    return rows


def ablation_table(rows, eps_grid, markdown=False) -> str:
    head = ["mechanism", "clean"] + [f"vra@{_fmt_eps(e)}" for e in eps_grid] + ["sec_per_epoch"]
    body = [[r.mechanism, f"{r.clean:.4f}"] + [f"{v:.4f}" for v in r.vra]
            + [f"{r.seconds_per_epoch:.3f}"] for r in rows]
    if markdown:
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        lines += ["| " + " | ".join(b) + " |" for b in body]
        return "\n".join(lines) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    w.writerows(body)
    return buf.getvalue()


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
