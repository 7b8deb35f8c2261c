import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lipcert import autodiff as ad
from lipcert import layers as L
from lipcert.errors import NonConvergence, OddWidth, RankDeficient, ShapeMismatch

from .oracles import conv_matrix, modified_gram_schmidt_rows, sorted_pairs, svd_norm

ORTHO = {
    "cayley": L.orthogonalize_cayley,
    "matexp": L.orthogonalize_matexp,
    "cholesky": lambda v: L.orthogonalize_cholesky(np.eye(len(v)) + v),
    "lot": lambda v: L.orthogonalize_lot(np.eye(len(v)) + v),
}


def ortho_residual(w):
    return np.linalg.norm(w.T @ w - np.eye(w.shape[1]))


@pytest.mark.parametrize("method", sorted(ORTHO))
@given(seed=st.integers(0, 2**31), n=st.sampled_from([2, 4, 9, 16]))
def test_orthogonalization_residual(method, seed, n):
    v = np.random.default_rng(seed).standard_normal((n, n)) / math.sqrt(n)
    assert ortho_residual(ORTHO[method](v)) <= 1e-10


def test_cayley_of_zero_is_identity():
    np.testing.assert_allclose(L.orthogonalize_cayley(np.zeros((4, 4))), np.eye(4))


def test_cayley_two_by_two_rotation():
    # V = [[0, a], [-a, 0]] gives a rotation with cos = (1 - a^2) / (1 + a^2)
    a = 0.5
    w = L.orthogonalize_cayley(np.array([[0.0, 2 * a], [0.0, 0.0]]))
    assert w[0, 0] == pytest.approx((1 - a * a) / (1 + a * a))


def test_matexp_skew_input_only_uses_skew_part():
    v = np.random.default_rng(0).standard_normal((5, 5))
    np.testing.assert_allclose(L.orthogonalize_matexp(v), L.orthogonalize_matexp(L.skew(v)))


@given(st.integers(0, 2**31))
def test_cholesky_matches_gram_schmidt(seed):
    a = np.random.default_rng(seed).standard_normal((6, 6)) + 2 * np.eye(6)
    np.testing.assert_allclose(L.orthogonalize_cholesky(a), modified_gram_schmidt_rows(a),
                               atol=1e-9)


@pytest.mark.parametrize("shape", [(3, 7), (7, 3), (5, 5)])
def test_cholesky_rectangular(shape):
    a = np.random.default_rng(1).standard_normal(shape)
    w = L.orthogonalize_cholesky(a)
    assert w.shape == shape
    small = min(shape)
    gram = w @ w.T if shape[0] <= shape[1] else w.T @ w
    assert np.linalg.norm(gram - np.eye(small)) < 1e-10
    assert svd_norm(w) == pytest.approx(1.0)


@pytest.mark.parametrize("wrap", [np.asarray, lambda a: ad.Tape().param(a)])
def test_cholesky_rank_deficient(wrap):
    with pytest.raises(RankDeficient):
        L.orthogonalize_cholesky(wrap(np.zeros((3, 3))))


def test_cholesky_jitter_rescue_stays_contractive():
    # rank one: the jittered factorization succeeds and W W^T = I - jitter (L L^T)^-1 <= I
    assert svd_norm(L.orthogonalize_cholesky(np.ones((3, 3)))) <= 1.0 + 1e-12


def test_lot_reports_nonconvergence():
    a = np.diag([1.0, 1e-9])
    with pytest.raises(NonConvergence):
        L.orthogonalize_lot(a, newton_iters=3)


def test_lot_matches_polar_factor():
    a = np.random.default_rng(2).standard_normal((5, 5)) + 3 * np.eye(5)
    u, _, vt = np.linalg.svd(a)
    np.testing.assert_allclose(L.orthogonalize_lot(a), u @ vt, atol=1e-9)


@pytest.mark.parametrize("cls", [L.CayleyDense, L.MatExpDense, L.LOTDense])
@pytest.mark.parametrize("dims", [(4, 6), (6, 4)])
def test_rectangular_orthogonal_layers_pad_a_square_core(cls, dims):
    layer = cls(*dims)
    layer.init_params(np.random.default_rng(0))
    w = layer.weight()
    assert w.shape == (dims[1], dims[0])
    assert svd_norm(w) == pytest.approx(1.0)


def test_aol_is_identity_on_orthogonal_input():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((5, 5)))
    np.testing.assert_allclose(L.aol_weight(q), q, atol=1e-12)


@given(st.integers(0, 2**31), st.sampled_from([-0.5, -1.0]))
def test_aol_bound_sound(seed, exponent):
    layer = L.AOLDense(5, 7, exponent=exponent)
    layer.params = {"V": np.random.default_rng(seed).standard_normal((7, 5)), "b": np.zeros(7)}
    assert svd_norm(layer.weight()) <= layer.lipschitz() + 1e-9


def test_aol_zero_column_gets_zero_scale():
    v = np.array([[1.0, 0.0], [1.0, 0.0]])
    w = L.aol_weight(v)
    np.testing.assert_array_equal(w[:, 1], [0.0, 0.0])


def test_aol_rejects_other_exponents():
    with pytest.raises(ValueError):
        L.AOLDense(3, exponent=-2)


@pytest.mark.parametrize("dims", [(3, 5, 4), (6, 2, 6), (4, 4, 8)])
def test_sandwich_factors_partition_identity(dims):
    n_in, n_out, h = dims
    raw = np.random.default_rng(0).standard_normal((n_in + n_out, h))
    at, bt = L.sandwich_factors(raw, n_out)
    np.testing.assert_allclose(at.T @ at + bt.T @ bt, np.eye(h), atol=1e-10)
    assert 2 * svd_norm(at @ bt.T) <= 1 + 1e-9


def test_sandwich_needs_enough_rows():
    with pytest.raises(ShapeMismatch):
        L.sandwich_factors(np.zeros((2, 5)), 1)


def test_sandwich_minmax_needs_even_hidden():
    with pytest.raises(OddWidth):
        L.SandwichBlock(4, hidden=3, activation="minmax")


def test_minmax_layer_matches_reference():
    x = np.random.default_rng(0).standard_normal((3, 6))
    np.testing.assert_array_equal(L.MinMax((6,)).forward(x), sorted_pairs(x))


def test_minmax_channels_on_feature_maps():
    x = np.random.default_rng(0).standard_normal((2, 4, 3, 3))
    out = L.MinMax((4, 3, 3)).forward(x)
    np.testing.assert_array_equal(out, np.moveaxis(sorted_pairs(np.moveaxis(x, 1, -1)), -1, 1))


def test_minmax_preserves_norm():
    x = np.random.default_rng(0).standard_normal((5, 8))
    np.testing.assert_allclose(np.linalg.norm(L.minmax(x), axis=1), np.linalg.norm(x, axis=1))


# -- layer zoo ------------------------------------------------------------------

def zoo():
    return {
        "dense_gloro": L.DenseGloRo(6, 4),
        "residual_gloro": L.ResidualDenseGloRo(6),
        "cayley": L.CayleyDense(6),
        "matexp": L.MatExpDense(6),
        "lot": L.LOTDense(6),
        "cholesky_residual": L.CholeskyResidualDense(6),
        "cholesky_neck": L.CholeskyDense(6, 4),
        "aol": L.AOLDense(6),
        "aol_inv": L.AOLDense(6, exponent=-1),
        "sll": L.SLLBlock(6, hidden=8),
        "sandwich": L.SandwichBlock(6, 4, hidden=6),
        "sandwich_minmax": L.SandwichBlock(6, hidden=4, activation="minmax"),
        "minmax": L.MinMax((6,)),
        "conv": L.ConvGloRo(2, 3, 4),
        "liresnet": L.LiResNetBlock(2, 4),
        "spatial": L.SpatialMLP(2, 3, groups=2),
        "head": L.Head(6, 3),
    }


def randomize(layer, seed, scale=0.3):
    layer.init_params(np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for k, v in layer.params.items():
        layer.params[k] = v + scale * rng.standard_normal(v.shape)
    return layer


@pytest.mark.parametrize("name", sorted(zoo()))
def test_displacement_within_reported_bound(name):
    layer = randomize(zoo()[name], 3)
    k = layer.lipschitz()
    rng = np.random.default_rng(4)
    x = rng.standard_normal((200,) + layer.in_shape)
    y = x + rng.standard_normal(x.shape) * rng.uniform(1e-3, 2, size=(200,) + (1,) * len(layer.in_shape))
    fx, fy = layer.forward(x), layer.forward(y)
    num = np.linalg.norm((fx - fy).reshape(200, -1), axis=1)
    den = np.linalg.norm((x - y).reshape(200, -1), axis=1)
    assert np.max(num / den) <= k + 1e-6


@pytest.mark.parametrize("name", ["cayley", "matexp", "lot", "cholesky_residual", "aol", "sll",
                                  "sandwich", "minmax"])
def test_constrained_layers_report_unit_bound(name):
    assert randomize(zoo()[name], 0).lipschitz() == 1.0


@pytest.mark.parametrize("name", sorted(zoo()))
def test_layer_gradients(name):
    # moderate perturbation keeps I + V well conditioned for central differences
    layer = randomize(zoo()[name], 5, scale=0.1)
    x = np.random.default_rng(6).standard_normal((3,) + layer.in_shape)
    w = np.random.default_rng(7).standard_normal((3,) + layer.out_shape)
    layer.refresh(max_iters=200, tol=1e-12)
    names = set(layer.params)

    def f(p):
        lp = {k: v for k, v in p.items() if k in names}
        out = ad.sum(layer.forward(p["x"], lp) * w)
        bt = layer.bound_term(lp)
        return out if bt is None else out + bt

    assert ad.finite_diff_check(f, {**layer.params, "x": x}) <= 1e-5


def test_conv_bound_matches_materialized_operator():
    layer = randomize(L.ConvGloRo(3, 4, 5), 0)
    truth = svd_norm(conv_matrix(layer.params["K"], 5))
    assert layer.lipschitz() == pytest.approx(truth, rel=1e-4)


def test_liresnet_bound_includes_identity():
    layer = randomize(L.LiResNetBlock(2, 4), 1)
    m = conv_matrix(layer.params["K"], 4) + np.eye(2 * 16)
    assert layer.lipschitz() == pytest.approx(svd_norm(m), rel=1e-4)


def test_spatial_mlp_bound_is_max_over_groups():
    layer = randomize(L.SpatialMLP(4, 3, groups=2), 2)
    norms = [svd_norm(np.eye(9) + w) for w in layer.params["W"]]
    assert layer.lipschitz() == pytest.approx(max(norms), rel=1e-5)


def test_spatial_mlp_functional_matches_layer():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3, 3))
    w = rng.standard_normal((2, 9, 9)) * 0.1
    y = L.spatial_mlp(x, w)
    flat = x.reshape(4, 9)
    ref = np.stack([flat[c] + w[c // 2] @ flat[c] for c in range(4)]).reshape(4, 3, 3)
    np.testing.assert_allclose(y, ref)


def test_spatial_mlp_group_divisibility():
    with pytest.raises(ShapeMismatch):
        L.SpatialMLP(3, 4, groups=2)


def test_bound_term_equals_power_iteration_estimate():
    layer = randomize(L.DenseGloRo(5, 4), 0)
    layer.refresh(max_iters=500, tol=1e-12)
    t = ad.Tape()
    p = {k: t.param(v, k) for k, v in layer.params.items()}
    assert float(layer.bound_term(p).value) == pytest.approx(svd_norm(layer.params["W"]), rel=1e-8)


def test_refresh_one_iteration_is_monotone_lower_bound():
    layer = randomize(L.DenseGloRo(8, 8), 0)
    truth = svd_norm(layer.params["W"])
    prev = 0.0
    for _ in range(20):
        layer.refresh()
        est = layer.lipschitz(converge=False)
        assert est <= truth * (1 + 1e-12)
        assert est >= prev - 1e-9
        prev = est


def test_shape_check():
    with pytest.raises(ShapeMismatch):
        L.CayleyDense(4).forward(np.zeros((2, 5)))


@pytest.mark.parametrize("name", sorted(zoo()))
def test_spec_round_trip(name):
    layer = zoo()[name]
    clone = L.from_spec(layer.spec())
    assert type(clone) is type(layer)
    assert clone.spec() == layer.spec()


@pytest.mark.parametrize("mech", sorted(L.MECHANISMS))
def test_dense_layer_factory(mech):
    layer = L.dense_layer(mech, 8)
    assert layer.in_shape == layer.out_shape == (8,)


def test_unknown_mechanism():
    with pytest.raises(ValueError):
        L.normalize_mechanism("orthogonal-magic")


def test_mechanism_aliases():
    assert L.normalize_mechanism("Cholesky-Residual") == "cholesky_residual"
    assert L.normalize_mechanism("gloro-regularized") == "gloro"


def test_sandwich_minmax_is_not_1_lipschitz():
    # minmax is a pair permutation, not a [0, 1]-slope diagonal map, so the
    # sandwich argument does not cover it; the layer reports sqrt(2) max/min psi
    layer = L.SandwichBlock(8, hidden=10, activation="minmax")
    layer.init_params(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    layer.params["R"] = layer.params["R"] + 0.5 * rng.standard_normal(layer.params["R"].shape)
    layer.params["b"] = rng.standard_normal(10)
    x = rng.standard_normal((2000, 8))
    d = 1e-6 * rng.standard_normal(x.shape)
    ratio = np.linalg.norm(layer.forward(x + d) - layer.forward(x), axis=1) / np.linalg.norm(d, axis=1)
    assert ratio.max() > 1.0
    assert ratio.max() <= layer.lipschitz() == pytest.approx(math.sqrt(2))
