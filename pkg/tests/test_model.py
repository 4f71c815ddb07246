import math

import numpy as np
import pytest

from conftest import randomize, small_config
from tailcast import autodiff as ad
from tailcast.autodiff import AffineLayer, Tensor
from tailcast.errors import ShapeError, ValidationError
from tailcast.graph import Station, build_graph
from tailcast.model import (
    Checkpoint,
    NetworkParameters,
    crps_mixture_tensor,
    crps_normal_tensor,
    deepset_embed,
    forward_params,
    gine_layer,
    mean_crps_loss,
    predict_params,
)
from tailcast.scoring import crps_mixture_array, crps_normal

C = math.log(0.01)


def zero_network(cfg):
    net = NetworkParameters.init(cfg, np.random.default_rng(0))
    for _, t in net.named_parameters():
        t.value = np.zeros_like(t.value)
    return net


def features(rng, n_nodes=5, n_members=3, n_features=4, days=None):
    shape = (n_nodes, n_members, n_features) if days is None else (days, n_nodes, n_members,
                                                                   n_features)
    return rng.normal(size=shape)


def test_all_zero_network_outputs(toy_graph):
    cfg = small_config(u_global=0.7)
    out = forward_params(zero_network(cfg), cfg, features(np.random.default_rng(0)), toy_graph)
    assert np.allclose(out["p"].value, 0.5)
    assert np.allclose(out["mu"].value, 0.0)
    assert np.allclose(out["sigma"].value, math.log(2) + 1e-3)
    assert out["sigma"].value[0] == pytest.approx(0.6941, abs=1e-4)
    assert np.all(out["xi"].value == 0.5)
    assert np.all(out["u"].value == 0.7)


def test_learned_heads_respect_bounds(toy_graph):
    cfg = small_config(xi_mode="learned", threshold_mode="learned")
    rng = np.random.default_rng(3)
    for _ in range(20):
        net = randomize(NetworkParameters.init(cfg, rng), rng, scale=5.0)
        out = forward_params(net, cfg, features(rng), toy_graph)
        assert np.all((out["xi"].value >= 0) & (out["xi"].value <= 0.99))
        assert np.all(out["u"].value >= C + 1e-6)
        assert np.all(out["sigma"].value >= 1e-3) and np.all(out["sigma_u"].value >= 1e-3)
        assert np.all((out["p"].value >= 0) & (out["p"].value <= 1))


def test_plain_normal_has_only_location_and_scale(toy_graph):
    cfg = small_config(variant="PlainNormal")
    net = NetworkParameters.init(cfg, np.random.default_rng(0))
    assert sorted(net.heads) == ["mu", "sigma"]
    assert sorted(forward_params(net, cfg, features(np.random.default_rng(0)), toy_graph)) == \
        ["mu", "sigma"]


def test_single_node_gine_by_hand():
    g = build_graph([Station("solo", 45, 7)], 300)
    rng = np.random.default_rng(4)
    w1, b1 = rng.normal(size=(5, 3)), rng.normal(size=5)
    w2, b2 = rng.normal(size=(3, 5)), rng.normal(size=3)
    mlp = [AffineLayer(Tensor(w1), Tensor(b1), "relu"), AffineLayer(Tensor(w2), Tensor(b2))]
    h = rng.normal(size=(1, 3))
    eps = 0.3
    got = gine_layer(Tensor(h), g, mlp, eps).value
    z = (1 + eps) * h + np.maximum(h + 1.0, 0.0)  # the self-loop carries weight 1
    expected = h + (np.maximum(z @ w1.T + b1, 0.0) @ w2.T + b2)
    assert np.allclose(got, expected, atol=1e-14)


def test_gine_with_zero_mlp_is_identity(toy_graph):
    rng = np.random.default_rng(5)
    mlp = [AffineLayer.init(rng, 4, 6, "relu"), AffineLayer.init(rng, 6, 4)]
    mlp[-1].weights.value[:] = 0.0
    h = rng.normal(size=(5, 4))
    assert np.array_equal(gine_layer(Tensor(h), toy_graph, mlp, 0.1).value, h)


def test_duplicated_members_double_the_pooled_sum():
    cfg = small_config()
    rng = np.random.default_rng(6)
    net = randomize(NetworkParameters.init(cfg, rng), rng)
    x = rng.normal(size=(3, 4))
    got = deepset_embed(np.concatenate([x, x]), net).value
    pooled = 2.0 * ad.mlp_forward(net.rho, Tensor(x)).value.sum(axis=0, keepdims=True)
    expected = ad.mlp_forward(net.psi, Tensor(pooled)).value[0]
    assert np.allclose(got, expected, atol=1e-12)


def test_member_order_does_not_matter(toy_graph):
    cfg = small_config()
    rng = np.random.default_rng(7)
    net = randomize(NetworkParameters.init(cfg, rng), rng)
    x = features(rng)
    base = predict_params(x, toy_graph, net, cfg)
    for _ in range(10):
        shuffled = predict_params(x[:, rng.permutation(3)], toy_graph, net, cfg)
        for a, b in zip(base, shuffled):
            assert np.allclose(list(a.params.as_dict().values()), list(b.params.as_dict().values()),
                               atol=1e-12)


def test_station_permutation_equivariance(toy_graph):
    cfg = small_config()
    rng = np.random.default_rng(8)
    net = randomize(NetworkParameters.init(cfg, rng), rng)
    x = features(rng)
    perm = rng.permutation(5)
    permuted = build_graph([toy_graph.stations[i] for i in perm], toy_graph.d_max)
    a = forward_params(net, cfg, x, toy_graph)
    b = forward_params(net, cfg, x[perm], permuted)
    for key in a:
        assert np.allclose(a[key].value[perm], b[key].value, atol=1e-12)


def test_batched_days_are_independent(toy_graph):
    cfg = small_config()
    rng = np.random.default_rng(9)
    net = randomize(NetworkParameters.init(cfg, rng), rng)
    x = features(rng, days=3)
    batched = forward_params(net, cfg, x, toy_graph)["mu"].value.reshape(3, 5)
    for d in range(3):
        assert np.allclose(batched[d], forward_params(net, cfg, x[d], toy_graph)["mu"].value)


@pytest.mark.parametrize("variant", ["PlainNormal", "NormalPointMass", "NormalPointMassGPD"])
def test_tensor_crps_matches_numpy(variant):
    rng = np.random.default_rng(10)
    n = 400
    p, mu = rng.uniform(0, 0.9, n), rng.uniform(-2, 2, n)
    sigma, sigma_u = rng.uniform(0.1, 3, n), rng.uniform(0.1, 3, n)
    u, xi = mu + rng.uniform(0.5, 3, n) * sigma, rng.uniform(0.05, 0.9, n)
    y = np.where(rng.random(n) < 0.3, C, np.maximum(rng.normal(0, 3, n), C))
    T = Tensor
    if variant == "PlainNormal":
        got = crps_normal_tensor(T(mu), T(sigma), y).value
        ref = crps_normal(mu, sigma, y)
    elif variant == "NormalPointMass":
        got = crps_mixture_tensor(T(p), T(mu), T(sigma), y, C).value
        ref = crps_mixture_array(p, mu, sigma, np.inf, 1.0, 0.5, C, y)
    else:
        got = crps_mixture_tensor(T(p), T(mu), T(sigma), y, C, T(u), T(sigma_u), T(xi)).value
        ref = crps_mixture_array(p, mu, sigma, u, sigma_u, xi, C, y)
    assert np.allclose(got, ref, atol=1e-12, rtol=0)


def test_loss_gradient_small_network(toy_graph):
    cfg = small_config(embed_dim=3, hidden_dim=3, gnn_layers=1, xi_mode="learned")
    rng = np.random.default_rng(11)
    net = randomize(NetworkParameters.init(cfg, rng), rng)
    x = features(rng, days=2)
    y = np.where(rng.random((2, 5)) < 0.4, C, rng.normal(0.5, 1.5, (2, 5)))
    loss = mean_crps_loss(net, cfg, x, y, toy_graph)
    loss.backward()
    for name, t in net.named_parameters():
        num = ad.finite_difference_gradient(
            lambda: float(mean_crps_loss(net, cfg, x, y, toy_graph).value), t)
        assert np.max(ad.gradient_relative_error(t.grad, num)) < 1e-4, name


def test_wrong_feature_count_rejected(toy_graph):
    cfg = small_config()
    net = NetworkParameters.init(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward_params(net, cfg, np.zeros((5, 3, 7)), toy_graph)
    with pytest.raises(ShapeError):
        forward_params(net, cfg, np.zeros((4, 3, 4)), toy_graph)


def test_config_validation():
    with pytest.raises(ValidationError):
        small_config(xi_fixed=1.0)
    with pytest.raises(ValidationError):
        small_config(u_global=C)
    with pytest.raises(ValueError):
        small_config(variant="Gamma")


def test_checkpoint_round_trip(tmp_path, toy_graph):
    cfg = small_config(xi_mode="learned", threshold_mode="learned")
    rng = np.random.default_rng(12)
    net = randomize(NetworkParameters.init(cfg, rng), rng)
    ckpt = Checkpoint(cfg, net, ["tp6", "a", "b", "c"], np.arange(4.0), np.ones(4), ["tp6"],
                      {"variant": "x"})
    ckpt.save(tmp_path / "m.json")
    back = Checkpoint.load(tmp_path / "m.json")
    x = features(rng)
    a, b = forward_params(net, cfg, x, toy_graph), forward_params(back.network, back.config, x,
                                                                   toy_graph)
    for key in a:
        assert np.array_equal(a[key].value, b[key].value)
    assert back.config == cfg and back.metadata == {"variant": "x"}
    back.save(tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
