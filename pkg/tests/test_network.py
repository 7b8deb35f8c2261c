import numpy as np
import pytest

from lipcert import autodiff as ad
from lipcert.errors import ShapeMismatch
from lipcert.layers import Head, MinMax
from lipcert.network import Network, build_liresnet, build_mlp, network_lipschitz

from .oracles import numeric_jacobian, svd_norm


def perturb(net, seed, scale=0.2):
    rng = np.random.default_rng(seed)
    for key, value in list(net.named_params()):
        net.set_param(key, value + scale * rng.standard_normal(value.shape))
    return net


def test_mlp_shapes_and_param_names():
    net = build_mlp(2, 3, width=8, depth=2)
    assert net.forward(np.zeros((5, 2))).shape == (5, 3)
    names = [k for k, _ in net.named_params()]
    assert names[0].startswith("0.") and names[-1] == f"{len(net.layers) - 1}.b"
    assert net.param_count() == sum(v.size for _, v in net.named_params())


def test_liresnet_shapes():
    net = build_liresnet((1, 6, 6), 4, channels=2, blocks=2, dense_depth=1, dense_width=16)
    assert net.forward(np.zeros((3, 1, 6, 6))).shape == (3, 4)


def test_head_must_be_last():
    with pytest.raises(ShapeMismatch):
        Network([Head(4, 2), MinMax((2,))], (4,), 2)


def test_input_shape_checked():
    with pytest.raises(ShapeMismatch):
        build_mlp(2, 2, width=4, depth=1).forward(np.zeros((1, 3)))


def test_dense_stack_must_match_neck():
    with pytest.raises(ShapeMismatch):
        build_liresnet((1, 4, 4), 2, channels=2, blocks=1, dense_depth=1, dense_width=8,
                       neck_width=6)


def test_tape_forward_matches_numeric_forward():
    net = perturb(build_mlp(3, 2, width=6, depth=2, mechanism="gloro"), 0)
    x = np.random.default_rng(1).standard_normal((4, 3))
    tape = ad.Tape()
    out = net.forward(x, net.bind(tape))
    np.testing.assert_allclose(ad.value_of(out), net.forward(x), atol=1e-12)


def test_composite_bound_dominates_jacobian_norm():
    net = perturb(build_liresnet((1, 4, 4), 3, channels=2, blocks=3, dense_depth=1,
                                 dense_width=8, mechanism="gloro"), 2)
    bound = network_lipschitz(net).backbone_product
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.uniform(size=(1, 4, 4))
        jac = numeric_jacobian(lambda z: net.features(z[None])[0], x)
        assert svd_norm(jac) <= bound * (1 + 1e-6)


def test_unconverged_bound_is_no_larger():
    net = perturb(build_mlp(4, 2, width=8, depth=2, mechanism="gloro"), 5)
    net.refresh(max_iters=1)
    quick = network_lipschitz(net, converge=False).backbone_product
    assert quick <= network_lipschitz(net).backbone_product * (1 + 1e-9)
