import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lipcert import data as D
from lipcert.errors import EmptyPool, EmptySet, ShapeMismatch


def scored(scores):
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    return D.Pool(np.arange(n, dtype=float)[:, None], np.zeros(n, int), D.GENERATED, scores)


def test_filter_drops_two_lowest_of_ten():
    pool = D.filter_bottom_scores(scored(np.linspace(0.1, 1.0, 10)[::-1]), 0.2)
    assert len(pool) == 8
    assert pool.scores.min() == pytest.approx(0.3)
    # order kept
    assert np.all(np.diff(pool.x[:, 0]) > 0)


def test_filter_fraction_zero_is_identity():
    pool = scored([0.3, 0.1, 0.2])
    out = D.filter_bottom_scores(pool, 0.0)
    np.testing.assert_array_equal(out.scores, pool.scores)


def test_filter_ties_drop_earliest():
    out = D.filter_bottom_scores(scored([0.5] * 5), 0.2)
    np.testing.assert_array_equal(out.x[:, 0], [1, 2, 3, 4])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.floats(0, 0.99))
def test_filter_count_and_threshold(scores, fraction):
    pool = scored(scores)
    out = D.filter_bottom_scores(pool, fraction)
    assert len(pool) - len(out) == int(np.floor(fraction * len(pool) + 1e-12))
    if len(out) < len(pool):
        dropped = np.setdiff1d(pool.x[:, 0], out.x[:, 0])
        assert pool.scores[dropped.astype(int)].max() <= out.scores.min()


def test_filter_errors():
    with pytest.raises(EmptySet):
        D.filter_bottom_scores(scored([]), 0.2)
    with pytest.raises(ValueError):
        D.filter_bottom_scores(scored([0.5]), 1.0)
    with pytest.raises(ValueError):
        D.filter_bottom_scores(D.Pool(np.zeros((2, 1)), [0, 1]), 0.2)


def pools(n_real=100, n_gen=50):
    real = D.Pool(np.zeros((n_real, 1)), np.zeros(n_real, int))
    gen = scored(np.linspace(0, 1, n_gen))
    return real, gen


@pytest.mark.parametrize("ratio,batch,counts", [("1:3", 1024, (256, 768)), ("1:0", 64, (64, 0)),
                                                ("1:1", 8, (4, 4))])
def test_mix_counts(ratio, batch, counts):
    real, gen = pools()
    b = D.mix_batch(real, gen, D.MixSpec.parse(ratio, batch), np.random.default_rng(0))
    assert (np.sum(b.origin == D.REAL), np.sum(b.origin == D.GENERATED)) == counts
    assert np.all(np.isnan(b.scores[b.origin == D.REAL]))


@given(st.integers(0, 4), st.integers(0, 4), st.integers(1, 8), st.integers(0, 1000))
def test_mix_counts_exact_for_every_ratio(rp, gp, mult, seed):
    if rp + gp == 0:
        return
    spec = D.MixSpec(rp, gp, (rp + gp) * mult)
    real, gen = pools(7, 300)
    b = D.mix_batch(real, gen, spec, np.random.default_rng(seed))
    assert np.sum(b.origin == D.REAL) == spec.n_real == rp * mult
    assert len(b.y) == spec.batch_size


def test_mix_is_deterministic():
    real, gen = pools()
    spec = D.MixSpec(1, 3, 16)
    a = D.mix_batch(real, gen, spec, np.random.default_rng(3))
    b = D.mix_batch(real, gen, spec, np.random.default_rng(3))
    np.testing.assert_array_equal(a.scores, b.scores)


def test_mix_without_replacement_when_pool_is_large():
    real, gen = pools(10, 40)
    b = D.mix_batch(real, gen, D.MixSpec(0, 1, 40), np.random.default_rng(1))
    assert len(np.unique(b.scores)) == 40


def test_mix_errors():
    real, _ = pools()
    with pytest.raises(EmptyPool):
        D.mix_batch(real, None, D.MixSpec(1, 1, 4), np.random.default_rng(0))
    with pytest.raises(ValueError):
        D.MixSpec(1, 2, 10)
    with pytest.raises(ValueError):
        D.MixSpec(0, 0, 4)


def test_sample_score_invariant():
    with pytest.raises(ValueError):
        D.Sample(np.zeros(2), 0, D.REAL, 0.5)
    with pytest.raises(ValueError):
        D.Sample(np.zeros(2), 0, D.GENERATED)


def test_pool_round_trips_through_samples():
    _, gen = pools()
    back = D.Pool.from_samples(gen.samples())
    np.testing.assert_array_equal(back.scores, gen.scores)
    assert back.origin == D.GENERATED


def two_blobs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.where(y[:, None] == 0, 0.25, 0.75) + 0.05 * rng.standard_normal((n, 2))
    return x, y


def test_generator_class_means():
    x, y = two_blobs()
    gen = D.GaussianMixtureGenerator.fit(x, y, 2)
    pool = gen.sample(10_000, seed=1)
    for c in (0, 1):
        assert np.abs(pool.x[pool.y == c].mean(axis=0) - gen.means[c]).max() < 0.05
    assert pool.origin == D.GENERATED
    assert pool.x.min() >= 0 and pool.x.max() <= 1


def test_generator_deterministic_stream():
    x, y = two_blobs()
    gen = D.GaussianMixtureGenerator.fit(x, y, 2)
    a, b = gen.stream(8, seed=4), gen.stream(8, seed=4)
    for _ in range(3):
        np.testing.assert_array_equal(next(a).x, next(b).x)


def test_generator_needs_two_classes():
    x, y = two_blobs()
    with pytest.raises(ValueError):
        D.GaussianMixtureGenerator.fit(x, np.zeros_like(y), 1)


def test_uniform_and_perfect_scorers():
    x, y = two_blobs(20)
    pool = D.Pool(x, y, D.GENERATED)
    uni = D.score_samples(lambda z: np.full((len(z), 4), 0.25), pool)
    np.testing.assert_allclose(uni.scores, 0.25)
    perfect = D.score_samples(lambda z: np.eye(2)[(z[:, 0] > 0.5).astype(int)], pool)
    assert np.all(perfect.scores >= 0.5)


def test_trained_scorer_separates_mislabeled_samples():
    from lipcert.network import build_mlp
    from lipcert.train import TrainConfig, train

    x, y = D.make_moons(300, seed=0)
    net = build_mlp(2, 2, width=8, depth=2)
    train(net, D.Pool(x, y), None, TrainConfig(epsilon_train=0.0, epochs=10,
                                               mix=D.MixSpec(1, 0, 32), record_time=False))
    xt, yt = D.make_moons(200, seed=5)
    scorer = D.network_scorer(net)
    matched = D.score_samples(scorer, D.Pool(xt, yt, D.GENERATED))
    flipped = D.score_samples(scorer, D.Pool(xt, 1 - yt, D.GENERATED))
    assert flipped.scores.mean() < matched.scores.mean()


def test_pipeline_keeps_no_bottom_fifth_sample():
    x, y = two_blobs()
    scorer = lambda z: np.stack([1 - z[:, 0], z[:, 0]], axis=1)  # noqa: E731
    gen = D.GaussianMixtureGenerator.fit(x, y, 2).sample(500, seed=2)
    full = D.score_samples(scorer, gen)
    kept = D.generated_pool(D.Pool(x, y), 2, 500, scorer, 0.2, seed=2)
    cutoff = np.sort(full.scores)[100 - 1]
    b = D.mix_batch(D.Pool(x, y), kept, D.MixSpec(1, 3, 64), np.random.default_rng(0))
    assert np.all(b.scores[b.origin == D.GENERATED] >= cutoff)


def test_moons_margin():
    x, y = D.make_moons(400, margin=0.3, seed=3)
    assert len(x) <= 400 and set(np.unique(y)) == {0, 1}
    assert D.min_interclass_distance(x, y) >= 0.3


def test_synthetic_images_range_and_labels():
    x, y = D.make_synthetic_images(50, size=8, seed=1)
    assert x.shape == (50, 1, 8, 8)
    assert x.min() >= 0 and x.max() <= 1
    assert set(np.unique(y)) <= {0, 1, 2, 3}


def test_lcds_round_trip(tmp_path):
    x, y = D.make_synthetic_images(7, size=4, seed=2)
    D.write_lcds(tmp_path / "a.lcds", x, y)
    x2, y2 = D.read_lcds(tmp_path / "a.lcds")
    np.testing.assert_array_equal(x, x2)
    np.testing.assert_array_equal(y, y2)


def test_lcds_rejects_truncation(tmp_path):
    D.write_lcds(tmp_path / "a.lcds", np.zeros((3, 2)), [0, 1, 0])
    raw = (tmp_path / "a.lcds").read_bytes()
    (tmp_path / "b.lcds").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        D.read_lcds(tmp_path / "b.lcds")
    (tmp_path / "c.lcds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        D.read_lcds(tmp_path / "c.lcds")


def test_dataset_dir_round_trip(tmp_path):
    real = D.Pool(np.random.default_rng(0).standard_normal((5, 3)), [0, 1, 2, 0, 1])
    gen = scored([0.1, 0.7])
    gen = D.Pool(np.ones((2, 3)), [2, 2], D.GENERATED, gen.scores)
    test = D.Pool(np.zeros((4, 3)), [1, 1, 0, 0])
    D.save_dataset_dir(tmp_path, {"train": [real, gen], "test": [test]})
    back = D.load_dataset_dir(tmp_path, "train", D.REAL)
    np.testing.assert_array_equal(back.x, real.x)
    g = D.load_dataset_dir(tmp_path, "train", D.GENERATED)
    np.testing.assert_array_equal(g.scores, [0.1, 0.7])
    assert len(D.load_any(tmp_path, "test")) == 4
    with pytest.raises(EmptySet):
        D.load_dataset_dir(tmp_path, "val")


def test_dataset_dir_shape_mismatch(tmp_path):
    with pytest.raises(ShapeMismatch):
        D.save_dataset_dir(tmp_path, {"train": [D.Pool(np.zeros((1, 2)), [0]),
                                                D.Pool(np.zeros((1, 3)), [0])]})


def test_mix_rejects_mismatched_shapes():
    real = D.Pool(np.zeros((4, 2)), np.zeros(4, int))
    with pytest.raises(ShapeMismatch):
        D.mix_batch(real, scored([0.5, 0.6]), D.MixSpec(1, 1, 4), np.random.default_rng(0))
