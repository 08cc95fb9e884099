import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import gradcheck
from xraft import engine as E


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


# -- conv2d ---------------------------------------------------------------


def test_conv2d_scalar_product():
    out = E.conv2d(E.tensor([[[[2.0]]]]), E.tensor([[[[3.0]]]]), E.tensor([0.0]))
    assert out.item() == 6.0


def test_conv2d_sum_of_ones():
    out = E.conv2d(torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3), torch.zeros(1))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_conv2d_matches_loop_oracle(rng, stride, padding):
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((2, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    got = E.conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), stride, padding)
    want = oracles.conv2d(x.astype(float), w.astype(float), b.astype(float), stride, padding)
    assert got.shape == want.shape
    assert np.abs(got.numpy() - want).max() <= 1e-5 * max(1.0, np.abs(want).max())


def test_conv2d_matches_loop_oracle_float64(rng, f64):
    x, w, b = rng.standard_normal((1, 3, 8, 8)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
    got = E.conv2d(t64(x), t64(w), t64(b), 1, 1).numpy()
    assert np.abs(got - oracles.conv2d(x, w, b, 1, 1)).max() <= 1e-12


def test_conv2d_shape_errors():
    with pytest.raises(E.ShapeError, match="input channels"):
        E.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
    with pytest.raises(E.ShapeError, match="does not fit"):
        E.conv2d(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 3))
    with pytest.raises(E.ShapeError, match="stride"):
        E.conv2d(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3), stride=0)


# -- bilinear sampling ----------------------------------------------------------


def test_bilinear_identity_grid(rng):
    x = torch.from_numpy(rng.standard_normal((2, 3, 5, 7)).astype(np.float32))
    out = E.bilinear_sample(x, E.coords_grid(2, 5, 7, dtype=torch.float32))
    assert torch.equal(out, x)


def test_bilinear_outside_is_zero(rng):
    x = torch.from_numpy(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    coords = E.coords_grid(1, 4, 4, dtype=torch.float32) + 10.0
    assert torch.count_nonzero(E.bilinear_sample(x, coords)) == 0
    assert torch.count_nonzero(E.bilinear_sample(x, coords - 25.0)) == 0


def test_bilinear_matches_oracle(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    coords = rng.uniform(0, 3, size=(1, 2, 4, 4))
    got = E.bilinear_sample(torch.from_numpy(x).float(), torch.from_numpy(coords).float()).numpy()
    assert np.abs(got - oracles.bilinear_sample(x, coords)).max() <= 1e-6


def test_bilinear_matches_oracle_partly_outside(rng, f64):
    x = rng.standard_normal((2, 3, 5, 6))
    coords = rng.uniform(-2, 7, size=(2, 2, 3, 4))
    got = E.bilinear_sample(t64(x), t64(coords)).numpy()
    assert np.abs(got - oracles.bilinear_sample(x, coords)).max() <= 1e-12


# -- correlation and pooling ------------------------------------------------------


def test_correlation_single_pair():
    f1 = torch.tensor([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
    f2 = torch.tensor([0.5, -1.0, 2.0, 1.0]).reshape(1, 4, 1, 1)
    vol = E.correlation_volume(f1, f2)
    assert vol.shape == (1, 1, 1, 1, 1)
    assert vol.item() == pytest.approx((0.5 - 2 + 6 + 4) / 2)


def test_correlation_zero_factor(rng):
    f1 = torch.from_numpy(rng.standard_normal((1, 8, 3, 3)).astype(np.float32))
    assert torch.count_nonzero(E.correlation_volume(f1, torch.zeros_like(f1))) == 0


def test_correlation_diagonal_maximum(f64):
    # Orthonormal columns: self-similarity 1/sqrt(D) beats every cross pair (0).
    d, h, w = 16, 3, 4
    basis = torch.eye(d, dtype=torch.float64)[:, : h * w].reshape(1, d, h, w)
    vol = E.correlation_volume(basis, basis).reshape(h * w, h * w).numpy()
    want = oracles.correlation(basis.numpy(), basis.numpy()).reshape(h * w, h * w)
    assert np.array_equal(vol.argmax(axis=1), np.arange(h * w))
    assert np.array_equal(want.argmax(axis=1), np.arange(h * w))


def test_correlation_matches_oracle(rng):
    f1, f2 = rng.standard_normal((2, 1, 5, 3, 4))
    got = E.correlation_volume(torch.from_numpy(f1).float(), torch.from_numpy(f2).float()).numpy()
    assert np.abs(got - oracles.correlation(f1, f2)).max() <= 1e-6


def test_correlation_shape_mismatch():
    with pytest.raises(E.ShapeError):
        E.correlation_volume(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 3))


def test_avg_pool_examples(rng):
    assert torch.equal(E.avg_pool2(torch.full((1, 2, 4, 6), 0.25)), torch.full((1, 2, 2, 3), 0.25))
    block = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
    assert E.avg_pool2(block).item() == 2.5
    x = rng.standard_normal((2, 3, 6, 4))
    got = E.avg_pool2(torch.from_numpy(x).float()).numpy()
    assert np.abs(got - oracles.avg_pool2(x)).max() <= 1e-6


def test_avg_pool_odd_rejected():
    with pytest.raises(E.ShapeError, match="even"):
        E.avg_pool2(torch.zeros(1, 1, 3, 4))


# -- elementwise suite ---------------------------------------------------------------


def test_elementwise_examples():
    assert E.relu(torch.tensor([-1.0, 2.0])).tolist() == [0.0, 2.0]
    assert E.sigmoid(torch.tensor(0.0)).item() == 0.5
    up = E.upsample_bilinear(torch.full((1, 2, 3, 4), 1.5), 8)
    assert up.shape == (1, 2, 24, 32)
    assert torch.allclose(up, torch.full_like(up, 1.5), atol=0, rtol=1e-6)


def test_elementwise_shape_errors():
    with pytest.raises(E.ShapeError):
        E.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(E.ShapeError):
        E.concat([torch.zeros(1, 2, 3, 3), torch.zeros(1, 2, 4, 3)], axis=1)


# -- backward ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = torch.randn(2, 3, 4, requires_grad=True)
    E.backward(x.sum())
    assert torch.equal(x.grad, torch.ones_like(x))


def test_backward_square():
    x = torch.tensor([3.0], requires_grad=True)
    E.backward((x * x).sum())
    assert x.grad.item() == 6.0


def test_backward_accumulates_and_replays_identically(rng):
    w = torch.from_numpy(rng.standard_normal((2, 3, 3, 3)).astype(np.float32)).requires_grad_(True)
    x = torch.from_numpy(rng.standard_normal((1, 3, 6, 6)).astype(np.float32))

    def loss():
        return E.tanh(E.conv2d(x, w, None, 1, 1)).pow(2).sum()

    E.backward(loss())
    first = w.grad.clone()
    E.backward(loss())
    assert torch.allclose(w.grad, 2 * first)
    w.grad = None
    E.backward(loss())
    assert torch.equal(w.grad, first)


def test_backward_rejects_non_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(E.ShapeError, match="scalar"):
        E.backward(x * 2)


# -- gradient checks (float64 central differences) ------------------------------------


def _rand(rng, *shape):
    return t64(rng.standard_normal(shape))


def test_grad_conv2d(rng, f64):
    x, w, b = _rand(rng, 1, 2, 5, 5), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    proj = _rand(rng, 1, 3, 3, 3)
    gradcheck(lambda x, w, b: (E.conv2d(x, w, b, 2, 1) * proj).sum(), [x, w, b])


def test_grad_bilinear_sample(rng, f64):
    x = _rand(rng, 1, 2, 4, 5)
    coords = t64(rng.uniform(-1.5, 5.5, size=(1, 2, 3, 3)))
    proj = _rand(rng, 1, 2, 3, 3)
    gradcheck(lambda x, c: (E.bilinear_sample(x, c) * proj).sum(), [x, coords])


def test_grad_correlation(rng, f64):
    f1, f2 = _rand(rng, 1, 3, 2, 3), _rand(rng, 1, 3, 2, 3)
    proj = _rand(rng, 1, 2, 3, 2, 3)
    gradcheck(lambda a, b: (E.correlation_volume(a, b) * proj).sum(), [f1, f2])


def test_grad_avg_pool(rng, f64):
    x, proj = _rand(rng, 1, 2, 4, 6), _rand(rng, 1, 2, 2, 3)
    gradcheck(lambda x: (E.avg_pool2(x) * proj).sum(), [x])


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_grad_binary(rng, f64, op):
    a, b, proj = _rand(rng, 2, 3), _rand(rng, 2, 3), _rand(rng, 2, 3)
    fn = getattr(E, op)
    gradcheck(lambda a, b: (fn(a, b) * proj).sum(), [a, b])


@pytest.mark.parametrize("op", ["relu", "tanh", "sigmoid"])
def test_grad_unary(rng, f64, op):
    x = _rand(rng, 3, 4)
    x = x + torch.sign(x) * 0.05  # keep relu away from its kink
    proj = _rand(rng, 3, 4)
    fn = getattr(E, op)
    gradcheck(lambda x: (fn(x) * proj).sum(), [x])


def test_grad_concat_upsample_instance_norm(rng, f64):
    a, b = _rand(rng, 1, 1, 2, 3), _rand(rng, 1, 2, 2, 3)
    proj = _rand(rng, 1, 3, 8, 12)
    gradcheck(lambda a, b: (E.upsample_bilinear(E.concat([a, b], 1), 4) * proj).sum(), [a, b])
    x, p2 = _rand(rng, 1, 2, 3, 3), _rand(rng, 1, 2, 3, 3)
    gradcheck(lambda x: (E.instance_norm(x) * p2).sum(), [x])


# -- determinism and precision --------------------------------------------------------------


def test_precision_switch():
    assert E.get_precision() == "float32"
    with E.precision("float64"):
        assert E.tensor([1.0]).dtype == torch.float64
    assert E.tensor([1.0]).dtype == torch.float32
    with pytest.raises(E.ConfigError):
        E.set_precision("float16")


def test_check_finite():
    E.check_finite(torch.ones(3))
    with pytest.raises(E.NonFiniteError, match="2 non-finite"):
        E.check_finite(torch.tensor([1.0, float("nan"), float("inf")]))


def test_seeded_generation_is_bit_identical():
    a = torch.randn(4, 4, generator=torch.Generator().manual_seed(7))
    b = torch.randn(4, 4, generator=torch.Generator().manual_seed(7))
    assert torch.equal(a, b)


# -- Adam -----------------------------------------------------------------------------------


def test_adam_zero_grad_leaves_param():
    p = torch.tensor([1.5])
    E.adam_step([p], [torch.zeros(1)], E.AdamState(learning_rate=0.1))
    assert p.item() == 1.5


def test_adam_first_step_size(f64):
    p = torch.tensor([1.0])
    state = E.AdamState()
    E.adam_step([p], [torch.ones(1)], state)
    assert state.step == 1
    assert 1.0 - p.item() == pytest.approx(5e-5 / (1 + 1e-8), rel=1e-9)


def test_adam_two_steps_match_scalar_reference(f64):
    p = torch.tensor([0.7])
    state = E.AdamState(learning_rate=1e-3)
    for _ in range(2):
        E.adam_step([p], [torch.tensor([0.3])], state)
    assert abs(p.item() - oracles.adam_scalar(0.7, [0.3, 0.3], 1e-3)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=6), st.floats(1e-4, 1e-1))
def test_adam_matches_scalar_reference_on_any_grad_sequence(grads, lr):
    with E.precision("float64"):
        p = torch.tensor([0.25])
        state = E.AdamState(learning_rate=lr)
        for g in grads:
            E.adam_step([p], [torch.tensor([g])], state)
        assert state.step == len(grads)
        assert abs(p.item() - oracles.adam_scalar(0.25, grads, lr)) <= 1e-12


def test_adam_rejects_bad_learning_rate():
    with pytest.raises(E.ConfigError):
        E.AdamState(learning_rate=0.0)
    with pytest.raises(E.ConfigError):
        E.Adam([torch.zeros(1)], learning_rate=-1.0)


def test_adam_moment_shapes_follow_params():
    params = [torch.zeros(2, 3), torch.zeros(4)]
    state = E.AdamState()
    E.adam_step(params, [torch.ones(2, 3), torch.ones(4)], state)
    assert [m.shape for m in state.first_moment] == [p.shape for p in params]
    assert [v.shape for v in state.second_moment] == [p.shape for p in params]
    assert math.isclose(state.step, 1)
