import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from helpers import fd_grad, rel_err

from stiefel_maml.kernel import KernelParams, kernel_loss
from stiefel_maml.model import (
    AS_STORED,
    EUCLIDEAN,
    MLP,
    STIEFEL,
    TRANSPOSED,
    ModelConfig,
    Param,
    ParamSet,
    dense_weight,
    init_params,
    load_params,
    save_params,
)
from stiefel_maml.tasks import Split


def dense_forward(config, params, x):
    """Reference forward pass on plain (out, in) matrices."""
    h = np.asarray(x, dtype=np.float64)
    act = np.tanh if config.activation == "tanh" else (lambda v: np.maximum(v, 0.0))
    n = len(config.layer_dims)
    for i in range(n):
        h = h @ dense_weight(params[f"layer{i}.weight"]).T + params[f"layer{i}.bias"].value
        if i < n - 1:
            h = act(h)
    return h


def test_init_shapes_and_kinds():
    cfg = ModelConfig(4, (8,), 3)
    ps = init_params(cfg, 0)
    w0, w1 = ps["layer0.weight"], ps["layer1.weight"]
    assert w0.value.shape == (8, 4) and w0.kind == STIEFEL and w0.orientation == AS_STORED
    # the (3, 8) head is stored tall as 8x3 and applied transposed
    assert w1.value.shape == (8, 3) and w1.kind == STIEFEL and w1.orientation == TRANSPOSED
    assert dense_weight(w1).shape == (3, 8)
    for b in ("layer0.bias", "layer1.bias"):
        assert ps[b].kind == EUCLIDEAN and not ps[b].value.any()
    for p in ps:
        if p.is_stiefel:
            assert np.linalg.norm(p.value.T @ p.value - np.eye(p.value.shape[1])) <= 1e-12
    assert ps.equals(init_params(cfg, 0))
    assert not ps.equals(init_params(cfg, 1))


def test_square_head_allowed():
    ps = init_params(ModelConfig(4, (3,), 3), 0)
    assert ps["layer1.weight"].value.shape == (3, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(4, (), 3)
    with pytest.raises(ValueError):
        ModelConfig(4, (0,), 3)
    with pytest.raises(ValueError):
        ModelConfig(4, (3,), 3, activation="gelu")


def test_paramset_invariants():
    with pytest.raises(ValueError):
        ParamSet([Param("a", np.eye(2)), Param("a", np.eye(2))])
    with pytest.raises(ValueError):
        ParamSet([Param("w", np.ones((3, 2)), STIEFEL)])
    with pytest.raises(ValueError):
        ParamSet([Param("w", np.eye(3)[:2], STIEFEL)])  # wide


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 6),
    st.lists(st.integers(1, 7), min_size=1, max_size=3),
    st.integers(1, 6),
    st.sampled_from(["tanh", "relu"]),
    st.integers(0, 10**6),
)
def test_orientation_matches_dense_reference(d_in, hidden, d_out, act, seed):
    cfg = ModelConfig(d_in, tuple(hidden), d_out, activation=act)
    rng = np.random.default_rng(seed)
    ps = init_params(cfg, seed)
    ps = ps.replace({p.name: rng.standard_normal(p.value.shape) for p in ps if not p.is_stiefel})
    x = rng.standard_normal((5, d_in))
    np.testing.assert_allclose(MLP(cfg).forward(ps, x), dense_forward(cfg, ps, x), atol=1e-12)


def test_forward_examples():
    cfg = ModelConfig(4, (8,), 3)
    model = MLP(cfg)
    ps = init_params(cfg, 0)
    np.testing.assert_array_equal(model.forward(ps, np.zeros((2, 4))), np.zeros((2, 3)))
    x = np.random.default_rng(0).standard_normal((1, 4))
    one = model.forward(ps, x)
    two = model.forward(ps, np.vstack([x, x]))
    # BLAS picks different kernels for 1 and 2 rows, so compare to rounding
    np.testing.assert_allclose(two, np.vstack([one, one]), rtol=1e-14, atol=1e-15)

    ident = ModelConfig(3, (3,), 3, activation="relu")
    ps = ParamSet([
        Param("layer0.weight", np.eye(3), STIEFEL),
        Param("layer0.bias", np.zeros((1, 3))),
        Param("layer1.weight", np.eye(3), STIEFEL),
        Param("layer1.bias", np.zeros((1, 3))),
    ])
    x = np.abs(np.random.default_rng(1).standard_normal((4, 3))) + 0.1
    np.testing.assert_array_equal(MLP(ident).forward(ps, x), x)
    with pytest.raises(ValueError):
        MLP(ident).forward(ps, np.ones((2, 4)))


def test_task_loss_examples():
    for n in (2, 5, 7):
        cfg = ModelConfig(3, (4,), n)
        model = MLP(cfg)
        ps = init_params(cfg, 0)
        split = Split(np.zeros((n, 3)), np.arange(n))
        assert model.task_loss(ps, split) == pytest.approx(math.log(n), abs=1e-14)

    # large-margin one-hot logits through the output bias
    cfg = ModelConfig(3, (4,), 3)
    model = MLP(cfg)
    ps = init_params(cfg, 0)
    ps = ps.replace({"layer1.bias": np.array([[50.0, 0.0, 0.0]])})
    assert model.task_loss(ps, Split(np.zeros((4, 3)), np.zeros(4, dtype=int))) < 1e-20

    with pytest.raises(ValueError):
        model.task_loss(ps, Split(np.zeros((1, 3)), np.array([3])))


def test_kernel_term():
    cfg = ModelConfig(3, (4,), 2)
    model = MLP(cfg)
    anchor = init_params(cfg, 0)
    ps = init_params(cfg, 1)
    split = Split(np.random.default_rng(0).standard_normal((6, 3)), np.arange(6) % 2)
    plain = model.task_loss(ps, split)
    assert model.task_loss(ps, split, KernelParams(mu=0.0), anchor) == plain
    kp = KernelParams(lam=0.7, mu=0.3)
    expected = plain + 0.3 * sum(
        kernel_loss(ps[n].value, anchor[n].value, kp) for n in ps.stiefel_names()
    )
    assert model.task_loss(ps, split, kp, anchor) == pytest.approx(expected, abs=1e-14)


def toy_problem(seed, regression=False, d_in=3, hidden=(4,), d_out=2, act="tanh"):
    head = "mean-squared-error" if regression else "softmax-cross-entropy"
    cfg = ModelConfig(d_in, hidden, d_out, activation=act, head=head)
    rng = np.random.default_rng(seed)
    ps = init_params(cfg, seed)
    ps = ps.replace({p.name: 0.3 * rng.standard_normal(p.value.shape) for p in ps if not p.is_stiefel})
    x = rng.standard_normal((6, d_in))
    y = rng.standard_normal((6, d_out)) if regression else rng.integers(0, d_out, 6)
    return MLP(cfg), ps, Split(x, y)


def fd_check(model, ps, split, kernel=None, anchor=None):
    grads = model.euclidean_grads(ps, split, kernel, anchor)
    worst = 0.0
    for p in ps:
        assert grads[p.name].shape == p.value.shape

        def f(v, name=p.name):
            return model.task_loss(ps.replace({name: v}, check=False), split, kernel, anchor)

        worst = max(worst, rel_err(grads[p.name], fd_grad(f, p.value)))
    return worst


def test_grads_match_fd_two_parameter_net():
    cfg = ModelConfig(1, (1,), 1, head="mean-squared-error")
    model = MLP(cfg)
    ps = ParamSet([
        Param("layer0.weight", [[0.7]]),
        Param("layer0.bias", [[0.0]]),
        Param("layer1.weight", [[-1.3]]),
        Param("layer1.bias", [[0.0]]),
    ])
    split = Split(np.array([[0.5], [-1.0], [2.0]]), np.array([[0.1], [0.4], [-0.3]]))
    assert fd_check(model, ps, split) <= 1e-5


@pytest.mark.parametrize("regression", [False, True])
@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_grads_match_fd_toy_nets(regression, act):
    worst = 0.0
    for seed in range(50):
        model, ps, split = toy_problem(seed, regression, act=act)
        worst = max(worst, fd_check(model, ps, split))
    assert worst <= 1e-5


def test_grads_with_kernel_term_match_fd():
    for seed in range(10):
        model, ps, split = toy_problem(seed)
        anchor = init_params(model.config, seed + 100)
        assert fd_check(model, ps, split, KernelParams(lam=0.8, mu=0.5), anchor) <= 1e-5


def test_zero_error_regression_bias_grad():
    cfg = ModelConfig(2, (3,), 1, head="mean-squared-error")
    model = MLP(cfg)
    ps = init_params(cfg, 0)
    x = np.random.default_rng(0).standard_normal((5, 2))
    y = model.forward(ps, x)
    grads = model.euclidean_grads(ps, Split(x, y))
    np.testing.assert_array_equal(grads["layer1.bias"], np.zeros((1, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_loss_nonnegative(seed, regression):
    model, ps, split = toy_problem(seed, regression)
    assert model.task_loss(ps, split) >= 0.0


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(4, (8,), 3)
    model = MLP(cfg)
    ps = init_params(cfg, 3)
    ps = ps.replace({"layer0.bias": np.random.default_rng(0).standard_normal((1, 8))})
    path = tmp_path / "ck.json"
    save_params(ps, path)
    back = load_params(path)
    assert back.equals(ps)
    split = Split(np.random.default_rng(1).standard_normal((5, 4)), np.arange(5) % 3)
    assert model.task_loss(back, split) == model.task_loss(ps, split)
    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        load_params(path)
