import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from korea_sfl.engine import (ContractError, DivergenceError, LayerSpec, NetworkSpec, ParamVector, SplitModel,
                              backward_client, backward_server, backward_split, evaluate, forward_client,
                              forward_network, forward_server, init_params, sgd_step, split_full)
from korea_sfl.data import Dataset

from helpers import fd_gradient, random_instance, rel_err


def _model(spec, client, server):
    return SplitModel(ParamVector(np.asarray(client, float), spec.segment_hash("client")),
                      ParamVector(np.asarray(server, float), spec.segment_hash("server")), spec)


def test_network_spec_validation():
    with pytest.raises(ContractError, match="out_dim"):
        NetworkSpec((LayerSpec(2, 3), LayerSpec(4, 2, "identity")), 2, 1)
    with pytest.raises(ContractError, match="split_at"):
        NetworkSpec.mlp([2, 3, 2], split_at=2)
    with pytest.raises(ContractError, match="identity"):
        NetworkSpec((LayerSpec(2, 3), LayerSpec(3, 2, "relu")), 2, 1)
    with pytest.raises(ContractError, match="num_classes"):
        NetworkSpec((LayerSpec(2, 3), LayerSpec(3, 2, "identity")), 3, 1)
    spec = NetworkSpec.mlp([4, 5, 6, 3], split_at=2)
    assert spec.param_count("client") == 4 * 5 + 5 + 5 * 6 + 6
    assert spec.param_count("server") == 6 * 3 + 3
    assert spec.feature_dim == 6


def test_forward_client_zero_weights_give_zero_features():
    spec = NetworkSpec.mlp([3, 4, 2], split_at=1)
    model = _model(spec, np.zeros(spec.param_count("client")), np.zeros(spec.param_count("server")))
    x = np.random.default_rng(0).standard_normal((5, 3))
    feats, _ = forward_client(model.client_portion, spec, x)
    assert feats.shape == (5, 4)
    assert np.all(feats == 0)


def test_forward_client_identity_layer():
    spec = NetworkSpec.mlp([3, 3, 2], split_at=1)
    client = np.concatenate([np.eye(3).ravel(), np.zeros(3)])
    model = _model(spec, client, np.zeros(spec.param_count("server")))
    x = np.abs(np.random.default_rng(1).standard_normal((4, 3)))
    feats, _ = forward_client(model.client_portion, spec, x)
    np.testing.assert_array_equal(feats, x)


def test_forward_client_matches_hand_computation():
    # relu(x W + b) worked out on paper for W = [[1, -2, .5], [.25, 1, -1]], b = [.1, -.2, .3]
    spec = NetworkSpec.mlp([2, 3, 2], split_at=1)
    W = [[1.0, -2.0, 0.5], [0.25, 1.0, -1.0]]
    b = [0.1, -0.2, 0.3]
    client = np.array([v for row in W for v in row] + b)
    model = _model(spec, client, np.zeros(spec.param_count("server")))
    x = np.array([[1.0, 2.0], [-1.0, 0.5]])
    feats, _ = forward_client(model.client_portion, spec, x)
    np.testing.assert_allclose(feats, [[1.6, 0.0, 0.0], [0.0, 2.3, 0.0]], atol=1e-12)


def test_forward_client_shape_error_names_dims():
    spec = NetworkSpec.mlp([3, 4, 2], split_at=1)
    model = init_params(spec, 0)
    with pytest.raises(ContractError, match=r"\[B, 3\].*\[5, 2\]"):
        forward_client(model.client_portion, spec, np.zeros((5, 2)))


def test_forward_server_uniform_logits_give_log_c():
    spec = NetworkSpec.mlp([3, 4, 7], split_at=1)
    model = _model(spec, np.zeros(spec.param_count("client")), np.zeros(spec.param_count("server")))
    loss, logits, _ = forward_server(model.server_portion, spec, np.ones((6, 4)), np.arange(6) % 7)
    assert loss == pytest.approx(math.log(7), abs=1e-14)


def test_forward_server_matches_scalar_oracle():
    spec = NetworkSpec.mlp([2, 2, 2], split_at=1)
    server = np.array([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])
    model = _model(spec, np.zeros(spec.param_count("client")), server)
    feats = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, _, _ = forward_server(model.server_portion, spec, feats, [0, 1])
    expected = 0.5 * (math.log1p(math.exp(-1.0)) + math.log1p(math.exp(-2.0)))
    assert loss == pytest.approx(expected, rel=1e-14)


def test_forward_server_loss_decreases_with_margin():
    spec = NetworkSpec.mlp([2, 2, 2], split_at=1)
    losses = []
    for margin in [0.5, 1, 2, 4, 8, 16, 32]:
        server = np.array([margin, 0.0, 0.0, 0.0, 0.0, 0.0])
        model = _model(spec, np.zeros(spec.param_count("client")), server)
        loss, _, _ = forward_server(model.server_portion, spec, np.array([[1.0, 0.0]]), [0])
        losses.append(loss)
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert 0 <= losses[-1] < 1e-13


def test_forward_server_rejects_bad_labels():
    spec = NetworkSpec.mlp([2, 3, 2], split_at=1)
    model = init_params(spec, 0)
    with pytest.raises(ContractError, match="labels"):
        forward_server(model.server_portion, spec, np.zeros((2, 3)), [0, 2])


def test_backward_split_matches_finite_differences():
    gen = np.random.default_rng(123)
    spec, model, x, y = random_instance(gen)
    fc, cc = forward_client(model.client_portion, spec, x)
    _, _, sc = forward_server(model.server_portion, spec, fc, y)
    gs, gf, gc = backward_split((cc, sc), y)
    analytic = np.concatenate([gc.values, gs.values])
    numeric = fd_gradient(lambda w: forward_network(spec, w, x, y)[0], model.full())
    assert rel_err(analytic, numeric) <= 1e-6

    def loss_of_features(f):
        return forward_server(model.server_portion, spec, f.reshape(fc.shape), y)[0]
    numeric_f = fd_gradient(loss_of_features, fc.ravel())
    assert rel_err(gf.ravel(), numeric_f) <= 1e-6


def test_gradients_vanish_at_convex_optimum():
    # single sample, one-hot target: logits pushed far apart drive the softmax gradient to zero
    spec = NetworkSpec.mlp([1, 1, 2], split_at=1)
    client = np.array([0.0, 1.0])
    server = np.array([0.0, 0.0, 60.0, -60.0])
    model = _model(spec, client, server)
    f, cc = forward_client(model.client_portion, spec, np.array([[0.0]]))
    _, _, sc = forward_server(model.server_portion, spec, f, [0])
    gs, gf, gc = backward_split((cc, sc), [0])
    assert np.linalg.norm(gs.values) <= 1e-8
    assert np.linalg.norm(gc.values) <= 1e-8


def test_duplicated_batch_gives_same_mean_gradient():
    gen = np.random.default_rng(5)
    spec, model, x, y = random_instance(gen)

    def grads(xb, yb):
        f, cc = forward_client(model.client_portion, spec, xb)
        _, _, sc = forward_server(model.server_portion, spec, f, yb)
        gs, _, gc = backward_split((cc, sc), yb)
        return np.concatenate([gc.values, gs.values])

    g1 = grads(x, y)
    g2 = grads(np.repeat(x, 2, axis=0), np.repeat(y, 2))
    np.testing.assert_allclose(g2, g1, rtol=1e-12, atol=1e-15)


def test_backward_rejects_mismatched_caches():
    spec = NetworkSpec.mlp([3, 4, 2], split_at=1)
    model = init_params(spec, 0)
    x = np.ones((3, 3))
    f, cc = forward_client(model.client_portion, spec, x)
    _, _, sc = forward_server(model.server_portion, spec, f, [0, 1, 0])
    with pytest.raises(ContractError, match="labels"):
        backward_split((cc, sc), [1, 1, 0])
    f2, cc2 = forward_client(model.client_portion, spec, np.ones((2, 3)))
    with pytest.raises(ContractError, match="different batches"):
        backward_split((cc2, sc), [0, 1, 0])
    _, dfeat = backward_server(sc)
    with pytest.raises(ContractError, match="feature_grad"):
        backward_client(cc2, dfeat)


def test_sgd_step_arithmetic():
    p = ParamVector(np.array([1.0, 2.0]), "h")
    out = sgd_step(p, ParamVector(np.array([1.0, -1.0]), "h"), 0.5)
    np.testing.assert_array_equal(out.values, [0.5, 2.5])
    same = sgd_step(p, ParamVector(np.zeros(2), "h"), 0.3)
    np.testing.assert_array_equal(same.values, p.values)


def test_sgd_step_geometric_decay_on_quadratic():
    w0 = np.array([3.0, -1.5, 0.25])
    w = ParamVector(w0.copy(), "h")
    for t in range(1, 31):
        w = sgd_step(w, ParamVector(w.values.copy(), "h"), 0.1)
        np.testing.assert_allclose(w.values, 0.9 ** t * w0, rtol=1e-12)


def test_sgd_step_errors():
    p = ParamVector(np.zeros(2), "h")
    with pytest.raises(DivergenceError):
        sgd_step(p, ParamVector(np.array([np.nan, 0.0]), "h"), 0.1)
    with pytest.raises(ContractError):
        sgd_step(p, ParamVector(np.zeros(3), "h"), 0.1)
    with pytest.raises(ContractError):
        sgd_step(p, ParamVector(np.zeros(2), "h"), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_split_forward_is_bit_identical_to_unsplit(seed):
    gen = np.random.default_rng(seed)
    spec, model, x, y = random_instance(gen)
    f, _ = forward_client(model.client_portion, spec, x)
    loss_split, logits_split, _ = forward_server(model.server_portion, spec, f, y)
    loss_full, logits_full = forward_network(spec, model.full(), x, y)
    assert loss_split == loss_full
    np.testing.assert_array_equal(logits_split, logits_full)


def test_init_is_deterministic_and_shared_across_splits():
    a = init_params(NetworkSpec.mlp([5, 8, 6, 3], split_at=1), 7)
    b = init_params(NetworkSpec.mlp([5, 8, 6, 3], split_at=1), 7)
    c = init_params(NetworkSpec.mlp([5, 8, 6, 3], split_at=2), 7)
    np.testing.assert_array_equal(a.full(), b.full())
    np.testing.assert_array_equal(a.full(), c.full())
    assert not np.array_equal(a.full(), init_params(a.spec, 8).full())


def test_evaluate_constant_predictor():
    spec = NetworkSpec.mlp([2, 2, 3], split_at=1)
    server = np.zeros(spec.param_count("server"))
    server[-3:] = [5.0, 0.0, 0.0]  # bias favours class 0
    model = _model(spec, np.zeros(spec.param_count("client")), server)
    ds = Dataset(np.random.default_rng(0).standard_normal((20, 2)), np.zeros(20, dtype=int), 3)
    ev = evaluate(model, ds)
    assert ev.accuracy == 1.0
    assert ev.per_class_recall[0] == 1.0
    assert np.isnan(ev.per_class_recall[1]) and np.isnan(ev.per_class_recall[2])


def test_evaluate_random_labels_near_chance():
    c, m = 5, 20000
    gen = np.random.default_rng(11)
    spec = NetworkSpec.mlp([4, 8, c], split_at=1)
    ds = Dataset(gen.standard_normal((m, 4)), gen.integers(0, c, m), c)
    ev = evaluate(init_params(spec, 3), ds)
    se = math.sqrt((1 / c) * (1 - 1 / c) / m)
    assert abs(ev.accuracy - 1 / c) <= 5 * se


def test_recall_weighted_by_class_share_equals_accuracy():
    gen = np.random.default_rng(2)
    spec = NetworkSpec.mlp([3, 6, 4], split_at=1)
    y = gen.integers(0, 3, 500)  # class 3 absent
    ds = Dataset(gen.standard_normal((500, 3)), y, 4)
    ev = evaluate(init_params(spec, 1), ds)
    shares = np.bincount(y, minlength=4) / y.size
    present = ~np.isnan(ev.per_class_recall)
    assert not present[3]
    assert np.sum(shares[present] * ev.per_class_recall[present]) == pytest.approx(ev.accuracy, abs=1e-12)


def test_split_full_roundtrip():
    spec = NetworkSpec.mlp([3, 4, 5, 2], split_at=2)
    model = init_params(spec, 4)
    again = split_full(spec, model.full())
    np.testing.assert_array_equal(again.client_portion.values, model.client_portion.values)
    np.testing.assert_array_equal(again.server_portion.values, model.server_portion.values)
