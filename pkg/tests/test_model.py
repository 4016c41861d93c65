import numpy as np
import pytest

import oracles
from conftest import random_graph, random_params
from rclg import ndcore as nd
from rclg.graphio import AttributedGraph, normalized_adjacency
from rclg.model import Hyperparams, ModelParams, encode_view, forward, global_fusion, local_fusion


def test_default_hyperparameters():
    hp = Hyperparams()
    assert (hp.alpha, hp.beta, hp.gamma, hp.l, hp.hidden, hp.T, hp.lr, hp.epochs) == \
        (0.01, 0.2, 10.0, 6, 256, 5, 5e-4, 500)
    assert hp.head_dim == 64


@pytest.mark.parametrize("change, msg", [
    ({"beta": 1.5}, "beta must be in \\[0,1\\]"),
    ({"hidden": 10, "heads": 4}, "divisible"),
    ({"l": 0}, "l must"),
    ({"T": 0}, "T must"),
    ({"k": 0}, "k must"),
])
def test_hyperparam_validation(change, msg):
    with pytest.raises(ValueError, match=msg):
        Hyperparams(**change)


def test_encoder_identity():
    hp = Hyperparams(alpha=0.0, hidden=3, heads=1, k=1)
    params = ModelParams.init(3, hp, np.random.default_rng(0))
    params["enc1.W0"] = np.eye(3)
    x = np.random.default_rng(1).standard_normal((5, 3))
    assert np.array_equal(encode_view(nd.Tensor(x), 1, params, hp, None).values, x)


def test_encoder_noise_scale():
    hp = Hyperparams(hidden=100, heads=1, k=1)
    params = ModelParams.init(2, hp, np.random.default_rng(0))
    x = nd.Tensor(np.random.default_rng(1).standard_normal((1000, 2)))
    noisy = encode_view(x, 1, params, hp, nd.RngStream(0, "noise"), epoch=3).values
    clean = encode_view(x, 1, params, hp.replace(alpha=0.0), None).values
    assert abs((noisy - clean).std() - 0.01) < 0.05 * 0.01


def test_views_differ_by_weights_only(rng):
    hp = Hyperparams(alpha=0.0, hidden=4, heads=2, k=2)
    params = ModelParams.init(3, hp, rng)
    x = nd.Tensor(rng.standard_normal((5, 3)))
    assert not np.array_equal(encode_view(x, 1, params, hp, None).values,
                              encode_view(x, 2, params, hp, None).values)


def _local_oracle_inputs(rng, n=6, hidden=6, l=3):
    hp = Hyperparams(hidden=hidden, heads=2, l=l, k=2)
    g = random_graph(rng, n)
    params = random_params(rng, 5, hp)
    z = rng.standard_normal((n, hidden))
    return hp, g, params, z


def test_local_fusion_matches_dense_oracle(rng):
    for _ in range(5):
        hp, g, params, z = _local_oracle_inputs(rng)
        ours, weights, _ = local_fusion(nd.Tensor(z), normalized_adjacency(g), params, hp)
        ref, ref_w = oracles.local_fusion(z, oracles.dense_norm_adj(g.n, g.edges), params["W_qL"].values,
                                          params["lnL.gain"].values, params["lnL.bias"].values, hp.l, hp.hidden)
        assert np.abs(ours.values - ref).max() < 1e-10
        assert np.abs(weights - ref_w).max() < 1e-10
        assert np.abs(weights.sum(axis=1) - 1).max() < 1e-6


def test_local_fusion_single_layer(rng):
    hp, g, params, z = _local_oracle_inputs(rng, l=1)
    adj = normalized_adjacency(g)
    ours, weights, _ = local_fusion(nd.Tensor(z), adj, params, hp)
    assert np.array_equal(weights, np.ones((g.n, 1)))
    expected = nd.layer_norm(nd.Tensor(adj @ z + z), params["lnL.gain"], params["lnL.bias"]).values
    assert np.allclose(ours.values, expected, atol=1e-14)


def test_local_fusion_edgeless(rng):
    hp, _, params, z = _local_oracle_inputs(rng)
    g = AttributedGraph(6, [], np.zeros((6, 1)))
    ours, _, H = local_fusion(nd.Tensor(z), normalized_adjacency(g), params, hp)
    assert all(np.array_equal(h.values, z) for h in H)
    expected = nd.layer_norm(nd.Tensor(2 * z), params["lnL.gain"], params["lnL.bias"]).values
    assert np.allclose(ours.values, expected, atol=1e-14)


def test_local_fusion_permutation_equivariant(rng):
    for _ in range(5):
        hp, g, params, z = _local_oracle_inputs(rng)
        perm = rng.permutation(g.n)
        inv = np.argsort(perm)
        pg = AttributedGraph(g.n, np.sort(inv[g.edges], axis=1), g.features[perm])
        a, _, _ = local_fusion(nd.Tensor(z), normalized_adjacency(g), params, hp)
        b, _, _ = local_fusion(nd.Tensor(z[perm]), normalized_adjacency(pg), params, hp)
        assert np.allclose(a.values[perm], b.values, atol=1e-12)


def test_max_pool_ignores_non_argmax_perturbation(rng):
    from rclg.graphio import propagate

    hp, g, params, z = _local_oracle_inputs(rng)
    H = np.stack([h.values for h in propagate(normalized_adjacency(g), nd.Tensor(z), hp.l)], axis=1)
    pooled = H.max(axis=1)
    top = H.argmax(axis=1)
    i, c = 0, 0
    other = next(t for t in range(hp.l) if t != top[i, c])
    gap = pooled[i, c] - H[i, other, c]
    bumped = H.copy()
    bumped[i, other, c] += gap / 2
    assert np.array_equal(bumped.max(axis=1) @ params["W_qL"].values, pooled @ params["W_qL"].values)
    # the analytic gradient of the pooled query lands only on the argmax layer
    S = nd.Tensor(H, requires_grad=True)
    (grad,) = nd.gradient(nd.sum(nd.max(S, axis=1)), [S])
    assert grad[i, other, c] == 0 and grad[i, top[i, c], c] == 1


def test_global_fusion_matches_dense_oracle(rng):
    for heads in (1, 2, 3):
        hp = Hyperparams(hidden=6, heads=heads, k=3, beta=0.2)
        params = random_params(rng, 4, hp)
        zl = rng.standard_normal((7, 6))
        c = rng.standard_normal((3, 6))
        ours, w = global_fusion(nd.Tensor(zl), nd.Tensor(c), params, hp)
        ref, ref_w = oracles.global_fusion(zl, c, params["W_qG"].values, params["lnG.gain"].values,
                                           params["lnG.bias"].values, hp.beta, heads)
        assert np.abs(ours.values - ref).max() < 1e-10
        assert np.abs(w - ref_w).max() < 1e-10
        assert np.abs(w.sum(axis=2) - 1).max() < 1e-6


def test_beta_zero_ignores_centers(rng):
    hp = Hyperparams(hidden=6, heads=2, k=2, beta=0.0)
    params = random_params(rng, 4, hp)
    zl = nd.Tensor(rng.standard_normal((5, 6)))
    a, _ = global_fusion(zl, nd.Tensor(rng.standard_normal((2, 6))), params, hp)
    b, _ = global_fusion(zl, nd.Tensor(rng.standard_normal((2, 6))), params, hp)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.values, nd.layer_norm(zl, params["lnG.gain"], params["lnG.bias"]).values)


def test_single_center(rng):
    hp = Hyperparams(hidden=4, heads=2, k=1, beta=1.0)
    params = ModelParams.init(3, hp, rng)
    c = rng.standard_normal((1, 4))
    out, w = global_fusion(nd.Tensor(rng.standard_normal((5, 4))), nd.Tensor(c), params, hp)
    assert np.array_equal(w, np.ones((5, 2, 1)))
    expected = nd.layer_norm(nd.Tensor(np.tile(c, (5, 1))), params["lnG.gain"], params["lnG.bias"]).values
    assert np.allclose(out.values, expected, atol=1e-12)


def test_global_fusion_rejects_wrong_center_count(rng):
    hp = Hyperparams(hidden=4, heads=2, k=3)
    params = ModelParams.init(3, hp, rng)
    with pytest.raises(nd.ShapeError):
        global_fusion(nd.Tensor(np.ones((2, 4))), nd.Tensor(np.ones((2, 4))), params, hp)


def test_symmetric_views_and_determinism(rng):
    hp = Hyperparams(hidden=8, heads=2, l=3, k=2, alpha=0.0)
    g = random_graph(rng, 8)
    params = random_params(rng, 5, hp)
    for name in ("W0", "b0"):
        params[f"enc2.{name}"] = params[f"enc1.{name}"].values
    params["C2"] = params["C1"].values
    s1, s2 = forward(g, params, hp, None)
    assert np.array_equal(s1.Z_G.values, s2.Z_G.values)
    noisy = hp.replace(alpha=0.01)
    a = forward(g, params, noisy, nd.RngStream(4, "noise"), epoch=2)
    b = forward(g, params, noisy, nd.RngStream(4, "noise"), epoch=2)
    for x, y in zip(a, b):
        assert np.array_equal(x.Z_G.values, y.Z_G.values) and np.array_equal(x.Z.values, y.Z.values)


def test_forward_shapes(rng):
    hp = Hyperparams(hidden=8, heads=2, l=3, k=2)
    g = random_graph(rng, 8)
    s, _ = forward(g, random_params(rng, 5, hp), hp, nd.RngStream(0, "noise"))
    assert s.S_shape == (8, 3, 8)
    assert s.Z.shape == s.Z_L.shape == s.Z_G.shape == s.Z_hat.shape == (8, 8)
    assert s.attn_local.shape == (8, 3) and s.attn_global.shape == (8, 2, 2)
    assert np.allclose(np.linalg.norm(s.Z_hat.values, axis=1), 1, atol=1e-9)


def test_params_npz_round_trip(tmp_path, rng):
    hp = Hyperparams(hidden=4, heads=2, k=2)
    params = random_params(rng, 3, hp)
    params.to_npz(tmp_path / "p.npz")
    back = ModelParams.from_npz(tmp_path / "p.npz")
    assert back.names() == params.names()
    assert all(np.array_equal(params[n].values, back[n].values) for n in params.names())
