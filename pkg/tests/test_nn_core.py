import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_explore import nn_core
from manifold_explore.nn_core import AdamState, NetworkSpec


def _spec(d=2, hidden=(8, 8), act="silu", emb="sinusoidal"):
    return NetworkSpec.for_state(d, hidden, act, emb, n_frequencies=3)


def _fd_params(f, params, eps=1e-6):
    g = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = eps
        g[i] = (f(params + e) - f(params - e)) / (2 * eps)
    return g


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec(3, (4,), 2, "silu", "sinusoidal", 8)
    with pytest.raises(ValueError):
        NetworkSpec.for_state(2, (4,), "relu")
    spec = _spec()
    assert spec.embedding_dim == 7
    assert spec.n_params == (9 * 8 + 8) + (8 * 8 + 8) + (8 * 2 + 2)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_init_is_seed_deterministic():
    spec = _spec()
    a = nn_core.init_network(spec, 3)
    np.testing.assert_array_equal(a, nn_core.init_network(spec, 3))
    assert not np.array_equal(a, nn_core.init_network(spec, 4))
    for W, b in nn_core.unpack(a, spec):
        assert np.all(b == 0)


def test_forward_shapes_and_single_state():
    spec = _spec()
    params = nn_core.init_network(spec, 0)
    x = np.random.default_rng(0).standard_normal((5, 2))
    out = nn_core.forward(params, spec, x, 0.3)
    assert out.shape == (5, 2)
    np.testing.assert_allclose(nn_core.forward(params, spec, x[2], 0.3), out[2], atol=1e-15)
    with pytest.raises(ValueError):
        nn_core.forward(params, spec, np.zeros((5, 3)), 0.3)
    with pytest.raises(ValueError):
        nn_core.forward(params[:-1], spec, x, 0.3)


def test_identity_network_is_linear():
    spec = NetworkSpec.for_state(2, (3,), "identity", "none")
    params = nn_core.init_network(spec, 1)
    x = np.random.default_rng(1).standard_normal((4, 2))
    y = np.random.default_rng(2).standard_normal((4, 2))
    f = lambda v: nn_core.forward(params, spec, v, 0.0)
    np.testing.assert_allclose(f(x + y) - f(y), f(x) - f(np.zeros_like(x)), atol=1e-12)


def test_zero_loss_at_own_output():
    spec = _spec()
    params = nn_core.init_network(spec, 0)
    x = np.random.default_rng(0).standard_normal((6, 2))
    loss, grad = nn_core.loss_and_grad(params, spec, x, 0.5, nn_core.forward(params, spec, x, 0.5))
    assert loss == 0.0
    np.testing.assert_array_equal(grad, 0.0)


def test_nonfinite_input_rejected():
    spec = _spec()
    params = nn_core.init_network(spec, 0)
    x = np.array([[np.nan, 0.0]])
    with pytest.raises(FloatingPointError):
        nn_core.loss_and_grad(params, spec, x, 0.5, np.zeros((1, 2)))


@pytest.mark.parametrize("act", ["silu", "tanh", "identity"])
@pytest.mark.parametrize("emb", ["sinusoidal", "scalar", "none"])
def test_grad_params_matches_finite_differences(act, emb):
    spec = _spec(act=act, emb=emb, hidden=(5, 4))
    rng = np.random.default_rng(7)
    params = nn_core.init_network(spec, 7) + 0.1 * rng.standard_normal(spec.n_params)
    x = rng.standard_normal((4, 2))
    t = rng.uniform(0, 1, 4)
    y = rng.standard_normal((4, 2))
    w = rng.uniform(0.5, 2.0, 4)
    g = nn_core.grad_params(params, spec, x, t, y, w)
    fd = _fd_params(lambda p: nn_core.loss_and_grad(p, spec, x, t, y, w)[0], params)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)


def test_input_vjp_and_jacobian_match_finite_differences():
    spec = _spec(hidden=(6, 6))
    rng = np.random.default_rng(5)
    params = nn_core.init_network(spec, 5)
    x = rng.standard_normal((3, 2))
    t = np.array([0.1, 0.5, 0.9])
    out, jac = nn_core.forward_and_jacobian(params, spec, x, t)
    np.testing.assert_allclose(out, nn_core.forward(params, spec, x, t), atol=1e-14)
    fd = np.empty_like(jac)
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1e-6
        fd[:, :, j] = (nn_core.forward(params, spec, x + e, t) - nn_core.forward(params, spec, x - e, t)) / 2e-6
    np.testing.assert_allclose(jac, fd, rtol=1e-6, atol=1e-8)
    cot = rng.standard_normal((3, 2))
    np.testing.assert_allclose(nn_core.input_vjp(params, spec, x, t, cot), np.einsum("ni,nij->nj", cot, jac),
                               atol=1e-12)


@given(st.integers(0, 2**31), st.floats(1e-4, 1e-1))
@settings(max_examples=25, deadline=None)
def test_adam_first_step_is_signed_lr(seed, lr):
    rng = np.random.default_rng(seed)
    params = rng.standard_normal(10)
    grad = rng.standard_normal(10)
    grad[np.abs(grad) < 1e-3] = 1.0
    new, state = nn_core.adam_step(AdamState.fresh(10, lr=lr), params, grad)
    np.testing.assert_allclose(new, params - lr * np.sign(grad), rtol=1e-6, atol=1e-9)
    assert state.step == 1


def test_adam_minimizes_quadratic():
    params = np.array([3.0, -2.0])
    state = AdamState.fresh(2, lr=0.05)
    for _ in range(2000):
        params, state = nn_core.adam_step(state, params, 2 * params)
    np.testing.assert_allclose(params, 0.0, atol=1e-3)


def test_checkpoint_roundtrip(tmp_path):
    spec = _spec()
    params = nn_core.init_network(spec, 2)
    path = tmp_path / "m.bin"
    nn_core.save_checkpoint(path, spec, params, {"note": "x", "k": 3})
    ck = nn_core.load_checkpoint(path)
    assert ck.spec == spec
    np.testing.assert_array_equal(ck.params, params)
    assert ck.meta == {"note": "x", "k": 3}
    blob = nn_core.dumps_checkpoint(spec, params)
    assert blob == nn_core.dumps_checkpoint(spec, params)
    with pytest.raises(ValueError):
        nn_core.loads_checkpoint(b"garbage" + blob)
