"""``lipcert`` command line: train, certify, attack, ablate, bench-ortho, report.

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 diverged
training, 4 shape mismatch between model and data.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .certify import certify_batch, pgd_attack_batch
from .config import RunConfig, load_config, parse_eps_list
from .data import (
    GaussianMixtureGenerator, Pool, filter_bottom_scores, load_any, make_moons,
    make_synthetic_images, network_scorer, save_dataset_dir, score_samples,
)
from .errors import ConfigError, DivergedLoss, LipcertError, ShapeMismatch
from .layers import (
    orthogonalize_cayley, orthogonalize_cholesky, orthogonalize_lot, orthogonalize_matexp,
)
from .network import build_liresnet, build_mlp
from .parallel import map_ordered, worker_count
from .train import ablate_dense_mechanism, ablation_table, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SHAPE = 0, 1, 2, 3, 4


def _err(msg):
    print(f"lipcert: {msg}", file=sys.stderr)


# -- shared construction -----------------------------------------------------------

def build_model(cfg: RunConfig, input_shape, n_classes, rng, mechanism=None):
    m = cfg.model
    mech = mechanism or m.mechanism
    if m.arch == "mlp":
        if len(input_shape) != 1:
            raise ShapeMismatch("the mlp architecture takes flat vector inputs")
        return build_mlp(input_shape[0], n_classes, m.width, m.depth, mech, rng)
    if len(input_shape) != 3:
        raise ShapeMismatch("the liresnet architecture takes (C, H, W) inputs")
    dims = m.resolved()
    return build_liresnet(input_shape, n_classes, channels=dims["channels"],
                          blocks=dims["blocks"], dense_depth=dims["dense_depth"],
                          dense_width=dims["dense_width"], mechanism=mech, kernel=m.kernel,
                          spatial_blocks=m.spatial_blocks, groups=m.groups, rng=rng)


def load_data(cfg: RunConfig):
    """(train pool, test pool, clip box for the generator/attack)."""
    d = cfg.data
    if d.task == "moons":
        x, y = make_moons(d.n_train, d.margin, d.noise, d.seed)
        xt, yt = make_moons(d.n_test, d.margin, d.noise, d.seed + 1)
        return Pool(x, y), Pool(xt, yt), None
    if d.task == "images":
        x, y = make_synthetic_images(d.n_train, d.image_size, d.n_classes, seed=d.seed)
        xt, yt = make_synthetic_images(d.n_test, d.image_size, d.n_classes, seed=d.seed + 1)
        return Pool(x, y), Pool(xt, yt), (0.0, 1.0)
    try:
        return load_any(d.train_path, "train"), load_any(d.test_path, "test"), (0.0, 1.0)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load data: {exc}") from exc


def n_classes_of(real: Pool, test: Pool, cfg: RunConfig):
    if cfg.data.task == "images":
        return cfg.data.n_classes
    return int(max(real.y.max(), test.y.max())) + 1


def generated_data(cfg, real, n_classes, clip, seed):
    """Fit the stand-in generator, score with a plainly trained scorer, filter."""
    d = cfg.data
    if d.generated == 0:
        return None
    gen = GaussianMixtureGenerator.fit(real.x, real.y, n_classes, clip=clip).sample(
        d.generated, seed=d.seed + 7)
    scorer_net = build_model(cfg, real.x.shape[1:], n_classes, np.random.default_rng(seed))
    scorer_cfg = cfg.train_config(record_time=False)
    scorer_cfg.epsilon_train = 0.0
    scorer_cfg.mix = type(scorer_cfg.mix)(1, 0, scorer_cfg.mix.batch_size)
    train(scorer_net, real, None, scorer_cfg)
    return filter_bottom_scores(score_samples(network_scorer(scorer_net), gen), d.filter_fraction)


# -- commands ------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    real, test, clip = load_data(cfg)
    n_classes = n_classes_of(real, test, cfg)
    seed = cfg.train.seed
    net = build_model(cfg, real.x.shape[1:], n_classes, np.random.default_rng(seed))
    tcfg = cfg.train_config(record_time=not args.no_timing)
    generated = generated_data(cfg, real, n_classes, clip, seed)
    out = Path(args.out)
    try:
        _, log = train(net, real, generated, tcfg, eval_data=(test.x, test.y),
                       verbose=args.verbose)
    except DivergedLoss as exc:
        out.mkdir(parents=True, exist_ok=True)
        exc.log.write(out / "train_log.csv")
        _err(f"training diverged in epoch {exc.epoch}")
        return EXIT_DIVERGED
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save(net, out / "checkpoint", config=cfg.echo(), seed=seed)
    splits = {"train": [real] + ([generated] if generated is not None else []), "test": [test]}
    save_dataset_dir(out / "data", splits)
    log.write(out / "train_log.csv")
    return EXIT_OK


def _certify_rows(net, pool, eps_list, methods, workers):
    certs = {m: certify_batch(net, pool.x, m, workers=workers) for m in methods}
    rows = []
    base = certs[methods[0]]
    flags = {(m, e): certs[m].certified_at(float(e)) for m in methods for e in eps_list}
    for i in range(len(pool)):
        row = [i, int(pool.y[i]), int(base.predicted[i]), repr(float(base.margin[i]))]
        for m in methods:
            row.append(repr(float(certs[m].radius[i])))
            row += [int(flags[(m, e)][i]) for e in eps_list]
        rows.append(row)
    header = ["index", "label", "predicted", "margin"]
    for m in methods:
        header.append(f"radius_{m}")
        header += [f"certified_{m}@{e}" for e in eps_list]
    correct = base.predicted == pool.y
    summary = [(m, e, float(np.mean(correct & flags[(m, e)]))) for m in methods for e in eps_list]
    return header, rows, summary, float(correct.mean())


def _load_for_eval(args):
    net, manifest = checkpoint.load(args.checkpoint)
    pool = load_any(args.data, args.split)
    net.check_input(pool.x[:1])
    if pool.y.max(initial=0) >= net.n_classes:
        raise ShapeMismatch("dataset labels exceed the model's class count")
    return net, pool, manifest


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if path:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def cmd_certify(args) -> int:
    eps_list = parse_eps_list(args.eps)
    net, pool, _ = _load_for_eval(args)
    methods = ["tight", "naive"] if args.method == "both" else [args.method]
    header, rows, summary, _ = _certify_rows(net, pool, eps_list, methods, worker_count())
    _write_csv(args.out, header, rows)
    sys.stdout.write(_write_csv(args.summary, ["method", "eps", "vra"],
                                [[m, str(e), repr(v)] for m, e, v in summary]))
    return EXIT_OK


def cmd_attack(args) -> int:
    eps_list = parse_eps_list(args.eps)
    net, pool, manifest = _load_for_eval(args)
    # moons inputs are unbounded; image tasks live in [0, 1]
    unbounded = manifest.get("config", {}).get("data", {}).get("task") == "moons"
    clip = None if args.no_clip or unbounded else (0.0, 1.0)
    workers = worker_count()
    chunk = args.chunk
    starts = list(range(0, len(pool), chunk))
    rows, summary, status = [], [], EXIT_OK
    cert = certify_batch(net, pool.x, "tight", workers=workers)
    correct = cert.predicted == pool.y
    for e in eps_list:
        eps = float(e)

        def run(s, eps=eps):
            rng = np.random.default_rng((args.seed, s))
            return pgd_attack_batch(net.forward, pool.x[s:s + chunk], pool.y[s:s + chunk], eps,
                                    args.steps, args.restarts, rng, clip)

        results = [r for part in map_ordered(run, starts, workers) for r in part]
        success = np.array([r.success for r in results])
        robust = float(np.mean(~success))
        certified = float(np.mean(correct & cert.certified_at(eps)))
        for i, r in enumerate(results):
            rows.append([i, int(pool.y[i]), str(e), int(r.success), repr(r.norm)])
        summary.append([str(e), repr(float(correct.mean())), repr(robust), repr(certified)])
        if robust < certified:
            _err(f"empirical robust accuracy {robust:.4f} < VRA {certified:.4f} at eps {e}: "
                 "a certified point was broken, which indicates a soundness bug")
            status = EXIT_CHECK
    _write_csv(args.out, ["index", "label", "eps", "success", "norm"], rows)
    sys.stdout.write(_write_csv(args.summary, ["eps", "clean", "empirical_robust", "vra_tight"],
                                summary))
    return status


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    real, test, clip = load_data(cfg)
    n_classes = n_classes_of(real, test, cfg)
    mechanisms = [m.strip() for m in args.mechanisms.split(",") if m.strip()]
    tcfg = cfg.train_config(record_time=not args.no_timing)
    generated = generated_data(cfg, real, n_classes, clip, cfg.train.seed)

    def build(mech, rng):
        return build_model(cfg, real.x.shape[1:], n_classes, rng, mechanism=mech)

    try:
        rows = ablate_dense_mechanism(build, real, generated, tcfg, mechanisms,
                                      eval_data=(test.x, test.y))
    except DivergedLoss as exc:
        _err(f"training diverged in epoch {exc.epoch}")
        return EXIT_DIVERGED
    text = ablation_table(rows, tcfg.eval_eps, markdown=args.markdown)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


ORTHO_METHODS = {
    "cholesky": lambda v: orthogonalize_cholesky(np.eye(len(v)) + v),
    "cayley": orthogonalize_cayley,
    "matexp": orthogonalize_matexp,
    "lot": lambda v: orthogonalize_lot(np.eye(len(v)) + v),
}


def bench_ortho(sizes, reps, methods=tuple(ORTHO_METHODS), seed=0):
    """Rows of (method, n, median ms, residual ||W^T W - I||_F), one warmup each."""
    rows = []
    for n in sizes:
        if n < 2:
            raise ConfigError("sizes must be at least 2")
        v = np.random.default_rng(seed).standard_normal((n, n)) * (0.1 / np.sqrt(n))
        for name in methods:
            fn = ORTHO_METHODS[name]
            w = fn(v)
            times = []
            for _ in range(reps):
                t0 = time.perf_counter()
                w = fn(v)
                times.append(time.perf_counter() - t0)
            resid = float(np.linalg.norm(w.T @ w - np.eye(n)))
            rows.append((name, n, 1e3 * float(np.median(times)), resid))
    return rows


def cmd_bench_ortho(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    if args.reps < 1:
        raise ConfigError("reps must be at least 1")
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    unknown = sorted(set(methods) - set(ORTHO_METHODS))
    if unknown:
        raise ConfigError(f"unknown methods {unknown}; choose from {sorted(ORTHO_METHODS)}")
    rows = bench_ortho(sizes, args.reps, methods)
    text = _write_csv(args.out, ["method", "n", "median_ms", "residual"],
                      [[m, n, f"{t:.3f}", f"{r:.3e}"] for m, n, t, r in rows])
    sys.stdout.write(text)
    bad = [r for r in rows if not r[3] <= 1e-6]
    for m, n, _, r in bad:
        _err(f"{m} at n={n}: orthogonality residual {r:.3e} exceeds 1e-6")
    return EXIT_CHECK if bad else EXIT_OK


def cmd_report(args) -> int:
    """Summarize training logs: final and best row per log."""
    out = []
    header = None
    for path in args.logs:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ConfigError(f"{path}: empty log")
        vra_cols = [c for c in rows[0] if c.startswith("vra@")]
        header = header or ["log", "epochs", "clean"] + vra_cols + ["best_" + vra_cols[-1], "lip"]
        last = rows[-1]
        best = max(float(r[vra_cols[-1]]) for r in rows)
        out.append([Path(path).parent.name or str(path), len(rows), f"{float(last['clean_acc']):.4f}"]
                   + [f"{float(last[c]):.4f}" for c in vra_cols]
                   + [f"{best:.4f}", f"{float(last['lip_product']):.4f}"])
    if args.markdown:
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(str(c) for c in r) + " |" for r in out]
        sys.stdout.write("\n".join(lines) + "\n")
    else:
        sys.stdout.write(_write_csv(None, header, out))
    return EXIT_OK


# -- entry point -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lipcert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("config")
    t.add_argument("--out", default="run")
    t.add_argument("--seed", type=int)
    t.add_argument("--no-timing", action="store_true", help="write 0 in the seconds column")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("certify", cmd_certify, "certify a dataset"),
                                 ("attack", cmd_attack, "run l2 PGD against a dataset")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("checkpoint")
        c.add_argument("data", help="dataset directory or LCDS file")
        c.add_argument("--split", default="test")
        c.add_argument("--eps", default="0,36/255,72/255,108/255")
        c.add_argument("--out", help="per-point CSV")
        c.add_argument("--summary", help="summary CSV (also printed)")
        c.set_defaults(func=func)
        if name == "certify":
            c.add_argument("--method", choices=("naive", "tight", "both"), default="tight")
        else:
            c.add_argument("--steps", type=int, default=100)
            c.add_argument("--restarts", type=int, default=5)
            c.add_argument("--seed", type=int, default=0)
            c.add_argument("--chunk", type=int, default=256)
            c.add_argument("--no-clip", action="store_true", help="do not clamp to [0, 1]")

    a = sub.add_parser("ablate", help="swap the dense-layer mechanism, everything else fixed")
    a.add_argument("config")
    a.add_argument("--mechanisms",
                   default="gloro,cayley,matexp,cholesky_residual,lot,aol,sll,sandwich")
    a.add_argument("--out")
    a.add_argument("--markdown", action="store_true")
    a.add_argument("--seed", type=int)
    a.add_argument("--no-timing", action="store_true")
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench-ortho", help="time the orthogonalization methods")
    b.add_argument("--sizes", default="64,256,1024")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--methods", default="cholesky,cayley,matexp,lot")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_ortho)

    r = sub.add_parser("report", help="summarize training logs")
    r.add_argument("logs", nargs="+")
    r.add_argument("--markdown", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except ShapeMismatch as exc:
        _err(f"shape mismatch: {exc}")
        return EXIT_SHAPE
    except (LipcertError, ValueError, OSError) as exc:
        _err(str(exc))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
