"""Datasets and the generated-data augmentation pipeline.

generate (class-conditional sampler with pseudo-labels) -> score (classifier
probability of the pseudo-label) -> filter (drop the lowest-scoring fraction)
-> mix (fixed real:generated ratio per batch).
"""
from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import EmptyPool, EmptySet, ShapeMismatch

REAL, GENERATED = "real", "generated"


@dataclass
class Sample:
    input: np.ndarray
    label: int
    origin: str = REAL
    score: float | None = None

    def __post_init__(self):
        if (self.score is not None) != (self.origin == GENERATED):
            raise ValueError("score is present exactly for generated samples")


@dataclass
class Pool:
    """A set of samples of one origin, stored as arrays."""

    x: np.ndarray
    y: np.ndarray
    origin: str = REAL
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ShapeMismatch("inputs and labels differ in length")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64)

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Pool(self.x[idx], self.y[idx], self.origin,
                    None if self.scores is None else self.scores[idx])

    def samples(self):
        return [Sample(self.x[i], int(self.y[i]), self.origin,
                       None if self.scores is None else float(self.scores[i]))
                for i in range(len(self))]

    @classmethod
    def from_samples(cls, samples):
        if not samples:
            raise EmptySet("no samples")
        origin = samples[0].origin
        scores = [s.score for s in samples]
        return cls(np.stack([s.input for s in samples]), [s.label for s in samples], origin,
                   None if scores[0] is None else np.array(scores))


@dataclass(frozen=True)
class MixSpec:
    real_parts: int = 1
    generated_parts: int = 0
    batch_size: int = 256

    def __post_init__(self):
        parts = self.real_parts + self.generated_parts
        if self.real_parts < 0 or self.generated_parts < 0 or parts == 0:
            raise ValueError("mix parts must be non-negative and not both zero")
        if self.batch_size % parts:
            raise ValueError(f"batch size {self.batch_size} is not divisible by {parts}")

    @property
    def n_real(self):
        return self.batch_size * self.real_parts // (self.real_parts + self.generated_parts)

    @property
    def n_generated(self):
        return self.batch_size - self.n_real

    @classmethod
    def parse(cls, ratio: str, batch_size: int):
        real, gen = (int(t) for t in ratio.split(":"))
        return cls(real, gen, batch_size)


@dataclass
class SampleBatch:
    x: np.ndarray
    y: np.ndarray
    origin: np.ndarray  # 'real' / 'generated' per row
    scores: np.ndarray  # NaN for real rows


def filter_bottom_scores(pool: Pool, fraction: float) -> Pool:
    """Drop the floor(fraction * N) lowest-scoring samples, keeping input order.

    Ties go by position: the earlier sample is dropped first.
    """
    if len(pool) == 0:
        raise EmptySet("nothing to filter")
    if pool.scores is None:
        raise ValueError("filtering needs scored samples")
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n_drop = math.floor(Fraction(fraction).limit_denominator(10 ** 9) * len(pool))
    order = np.argsort(pool.scores, kind="stable")
    keep = np.ones(len(pool), dtype=bool)
    keep[order[:n_drop]] = False
    return pool.subset(np.flatnonzero(keep))


def _draw(pool, n, rng):
    if len(pool) >= n:
        return rng.choice(len(pool), size=n, replace=False)
    return rng.integers(0, len(pool), size=n)


def mix_batch(real: Pool | None, generated: Pool | None, spec: MixSpec, rng) -> SampleBatch:
    """One batch with exactly ``spec.n_real`` real and ``spec.n_generated`` generated rows."""
    parts = []
    for pool, n, origin in ((real, spec.n_real, REAL), (generated, spec.n_generated, GENERATED)):
        if n == 0:
            continue
        if pool is None or len(pool) == 0:
            raise EmptyPool(f"the {origin} pool is empty but the mix needs {n} samples")
        idx = _draw(pool, n, rng)
        sc = pool.scores[idx] if pool.scores is not None else np.full(n, np.nan)
        parts.append((pool.x[idx], pool.y[idx], np.full(n, origin, dtype=object), sc))
    if len({p[0].shape[1:] for p in parts}) > 1:
        raise ShapeMismatch("real and generated samples differ in shape")
    x, y, o, s = (np.concatenate(c) for c in zip(*parts))
    return SampleBatch(x, y, o, s)


class GaussianMixtureGenerator:
    """Per-class Gaussian fitted to real data; stand-in for a conditional generator.

    ``shrinkage`` blends each class covariance toward a scaled identity so
    small classes still give a valid covariance.
    """

    def __init__(self, means, covs, priors, shape, clip=(0.0, 1.0)):
        self.means = means
        self.chols = [np.linalg.cholesky(c) for c in covs]
        self.priors = np.asarray(priors, dtype=np.float64)
        self.shape = tuple(shape)
        self.clip = clip

    @property
    def n_classes(self):
        return len(self.means)

    @classmethod
    def fit(cls, x, y, n_classes, clip=(0.0, 1.0), shrinkage=0.1):
        if n_classes < 2:
            raise ValueError("the generator needs at least two classes")
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y)
        flat = x.reshape(len(x), -1)
        d = flat.shape[1]
        means, covs, priors = [], [], []
        for c in range(n_classes):
            xc = flat[y == c]
            if len(xc) == 0:
                raise EmptyPool(f"class {c} has no real samples to fit")
            mu = xc.mean(axis=0)
            cov = np.cov(xc, rowvar=False, bias=True).reshape(d, d) if len(xc) > 1 \
                else np.zeros((d, d))
            avg = max(np.trace(cov) / d, 1e-6)
            cov = (1 - shrinkage) * cov + shrinkage * avg * np.eye(d) + 1e-9 * np.eye(d)
            means.append(mu)
            covs.append(cov)
            priors.append(len(xc) / len(flat))
        return cls(means, covs, priors, x.shape[1:], clip)

    def sample(self, n, seed=0) -> Pool:
        rng = np.random.default_rng(seed)
        labels = rng.choice(self.n_classes, size=n, p=self.priors)
        d = len(self.means[0])
        z = rng.standard_normal((n, d))
        out = np.empty((n, d))
        for c in range(self.n_classes):
            m = labels == c
            out[m] = self.means[c] + z[m] @ self.chols[c].T
        if self.clip is not None:
            out = np.clip(out, *self.clip)
        return Pool(out.reshape((n,) + self.shape), labels, GENERATED)

    def stream(self, batch, seed=0):
        """Endless deterministic stream of generated pools."""
        k = 0
        while True:
            yield self.sample(batch, seed=(seed, k))
            k += 1


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def score_samples(scorer, pool: Pool) -> Pool:
    """Attach the scorer's probability of each pseudo-label.

    ``scorer`` maps a batch of inputs to probability vectors.
    """
    probs = np.asarray(scorer(pool.x), dtype=np.float64)
    scores = np.clip(probs[np.arange(len(pool)), pool.y], 0.0, 1.0)
    return Pool(pool.x, pool.y, GENERATED, scores)


def network_scorer(net):
    """Probability scorer from a classifier network (softmax of its logits)."""
    return lambda x: softmax(net.forward(np.asarray(x, dtype=np.float64)))


def generated_pool(real: Pool, n_classes, n, scorer=None, fraction=0.2, seed=0, clip=(0.0, 1.0)):
    """generate -> score -> filter, as one call."""
    gen = GaussianMixtureGenerator.fit(real.x, real.y, n_classes, clip=clip).sample(n, seed)
    if scorer is None:
        return gen
    return filter_bottom_scores(score_samples(scorer, gen), fraction)


# -- synthetic datasets ---------------------------------------------------------

def make_moons(n, margin=0.3, noise=0.08, seed=0):
    """Two interleaved half-circles, rejection-sampled to an inter-class gap >= ``margin``.

    Returns (x, y) with x of shape (n, 2). The gap is the minimum Euclidean
    distance between any two points of different classes.
    """
    rng = np.random.default_rng(seed)
    half = [n // 2, n - n // 2]
    xs, ys = [], []
    for label, count in enumerate(half):
        t = rng.uniform(0, np.pi, size=4 * count)
        if label == 0:
            pts = np.stack([np.cos(t), np.sin(t)], axis=1)
        else:
            pts = np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1)
        pts = pts + noise * rng.standard_normal(pts.shape)
        xs.append(pts)
        ys.append(np.full(len(pts), label))
    # keep points at least margin/2 from the other class's noiseless arc
    keep = []
    for label in (0, 1):
        pts = xs[label]
        d = _arc_distance(pts, 1 - label)
        pts = pts[d >= margin / 2 + 1e-9][: half[label]]
        if len(pts) < half[label]:
            raise ValueError("could not sample enough points; lower the noise")
        keep.append(pts)
    # arc distance >= margin/2 on both sides does not by itself bound the
    # pairwise gap; enforce it directly
    a, b = keep
    while True:
        d = np.linalg.norm(a[:, None] - b[None], axis=2)
        bad = np.argwhere(d < margin)
        if len(bad) == 0:
            break
        ia, ib = bad[0]
        a = np.delete(a, ia, axis=0)
    x = np.concatenate([a, b])
    y = np.concatenate([np.zeros(len(a), int), np.ones(len(b), int)])
    perm = rng.permutation(len(x))
    return x[perm], y[perm]


def _arc_distance(pts, label):
    t = np.linspace(0, np.pi, 721)
    if label == 0:
        arc = np.stack([np.cos(t), np.sin(t)], axis=1)
    else:
        arc = np.stack([1 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return np.linalg.norm(pts[:, None] - arc[None], axis=2).min(axis=1)


def min_interclass_distance(x, y):
    """Brute-force minimum distance between points with different labels."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y)
    best = math.inf
    for c in np.unique(y):
        a, b = x[y == c], x[y != c]
        if len(a) and len(b):
            best = min(best, float(np.linalg.norm(a[:, None] - b[None], axis=2).min()))
    return best


def _bar_templates(size):
    t = np.zeros((4, size, size))
    mid = size // 2
    t[0, mid - 1:mid + 1, 1:-1] = 1.0                # horizontal bar
    t[1, 1:-1, mid - 1:mid + 1] = 1.0                # vertical bar
    for i in range(1, size - 1):
        t[2, i, i] = t[2, i, min(i + 1, size - 1)] = 1.0    # diagonal
        t[3, i, size - 1 - i] = t[3, i, max(size - 2 - i, 0)] = 1.0  # anti-diagonal
    return t


def make_synthetic_images(n, size=8, n_classes=4, noise=0.25, seed=0, outlier_frac=0.0):
    """Single-channel ``size`` x ``size`` images of oriented bars with noise.

    Each image is a randomly shifted, randomly scaled class template plus
    Gaussian noise, clipped to [0, 1]. ``outlier_frac`` of the images are
    low-contrast, heavily noised hard cases.
    """
    if n_classes > 4:
        raise ValueError("at most 4 template classes")
    rng = np.random.default_rng(seed)
    temps = _bar_templates(size)
    y = rng.integers(0, n_classes, size=n)
    x = np.empty((n, 1, size, size))
    for i in range(n):
        img = np.roll(temps[y[i]], shift=tuple(rng.integers(-1, 2, size=2)), axis=(0, 1))
        contrast = rng.uniform(0.5, 1.0)
        sigma = noise
        if rng.uniform() < outlier_frac:
            contrast, sigma = rng.uniform(0.15, 0.35), 2 * noise
        x[i, 0] = np.clip(0.1 + contrast * img + sigma * rng.standard_normal((size, size)), 0, 1)
    return x, y


# -- file formats -----------------------------------------------------------------

MAGIC = b"LCDS"


def write_lcds(path, x, y):
    """Flat binary: 'LCDS', u32 count, u32 ndim, u32 sizes[ndim], then per sample
    a u32 label followed by prod(sizes) little-endian float64 values."""
    x = np.asarray(x, dtype="<f8")
    y = np.asarray(y)
    shape = x.shape[1:]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(x), len(shape)))
        fh.write(struct.pack(f"<{len(shape)}I", *shape))
        for xi, yi in zip(x, y):
            fh.write(struct.pack("<I", int(yi)))
            fh.write(xi.tobytes())


def read_lcds(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an LCDS file")
    count, ndim = struct.unpack_from("<II", data, 4)
    shape = struct.unpack_from(f"<{ndim}I", data, 12)
    off = 12 + 4 * ndim
    per = int(np.prod(shape))
    rec = np.dtype([("label", "<u4"), ("x", "<f8", (per,))])
    if len(data) - off != count * rec.itemsize:
        raise ValueError(f"{path}: truncated or oversized payload")
    arr = np.frombuffer(data, dtype=rec, count=count, offset=off)
    return arr["x"].reshape((count,) + tuple(shape)).astype(np.float64), arr["label"].astype(np.int64)


def save_dataset_dir(root, splits: dict[str, list[Pool]]):
    """Write ``index.csv`` + one raw float64 blob per split.

    index.csv columns: path, offset, label, origin, score (offset counts samples).
    The per-sample shape goes to ``meta.json``.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shape = None
    rows = []
    for split, pools in splits.items():
        blob = f"{split}.bin"
        xs = []
        offset = 0
        for pool in pools:
            shape = pool.x.shape[1:] if shape is None else shape
            if pool.x.shape[1:] != shape:
                raise ShapeMismatch("all samples must share one shape")
            for i in range(len(pool)):
                score = "" if pool.scores is None else repr(float(pool.scores[i]))
                rows.append([blob, offset, int(pool.y[i]), pool.origin, score])
                offset += 1
            xs.append(pool.x)
        np.concatenate(xs).astype("<f8").tofile(root / blob)
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "offset", "label", "origin", "score"])
        w.writerows(rows)
    (root / "meta.json").write_text(json.dumps({"shape": list(shape)}, indent=2) + "\n")


def load_dataset_dir(root, split="test", origin=None) -> Pool:
    """Read one split (optionally one origin) back as a pool."""
    root = Path(root)
    shape = tuple(json.loads((root / "meta.json").read_text())["shape"])
    per = int(np.prod(shape))
    blob_name = f"{split}.bin"
    rows = []
    with open(root / "index.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            if r["path"] == blob_name and (origin is None or r["origin"] == origin):
                rows.append(r)
    if not rows:
        raise EmptySet(f"no samples for split {split!r} in {root}")
    blob = np.fromfile(root / blob_name, dtype="<f8").reshape(-1, per)
    idx = np.array([int(r["offset"]) for r in rows])
    x = blob[idx].reshape((len(idx),) + shape).astype(np.float64)
    y = np.array([int(r["label"]) for r in rows])
    origins = {r["origin"] for r in rows}
    org = origins.pop() if len(origins) == 1 else REAL
    scores = None
    if org == GENERATED:
        scores = np.array([float(r["score"]) for r in rows])
    return Pool(x, y, org, scores)


def load_any(path, split="test") -> Pool:
    path = Path(path)
    if path.is_dir():
        return load_dataset_dir(path, split)
    x, y = read_lcds(path)
    return Pool(x, y)
