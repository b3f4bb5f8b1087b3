import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omnisonic.numerics import (
    OSTN_MAGIC, NonFiniteError, Rng, check_finite, finite_diff_at, finite_diff_grad, flatten_params, grad,
    layer_norm, matrix_sqrt_psd, ostn_bytes, read_ostn, relative_error, softmax, write_ostn,
)

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


# -- Rng -------------------------------------------------------------------

def test_rng_same_seed_same_stream():
    a, b = Rng(7, 1, 2), Rng(7, 1, 2)
    assert np.array_equal(a.normal(100), b.normal(100))
    assert np.array_equal(a.integers(0, 1000, 50), b.integers(0, 1000, 50))


def test_rng_keys_give_independent_streams():
    assert not np.array_equal(Rng(7, 1).random(20), Rng(7, 2).random(20))
    assert not np.array_equal(Rng(7).random(20), Rng(8).random(20))


def test_rng_child_matches_explicit_keys():
    assert np.array_equal(Rng(3, 4).child(5).random(10), Rng(3, 4, 5).random(10))


def test_rng_known_values_are_frozen():
    # Philox keyed by SeedSequence is platform independent; values recorded once
    assert Rng(0).gen.integers(0, 2**31, 3).tolist() == [291248084, 30208729, 2013765090]
    assert Rng(0, 1).random(2).tolist() == [0.6073659924129827, 0.5037305356300301]
    assert Rng.algorithm.startswith("philox")


def test_rng_rejects_bad_seed():
    with pytest.raises(ValueError):
        Rng(-1)
    with pytest.raises(ValueError):
        Rng(2**64)


def test_randn_tensor_dtype_and_shape():
    t = Rng(0).randn_tensor((2, 3), dtype=torch.float64)
    assert t.shape == (2, 3) and t.dtype == torch.float64


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(softmax(np.zeros(3)), 1 / 3, rtol=0, atol=1e-15)


def test_softmax_matches_double_oracle():
    v = [2.0, 1.0, 0.0]
    denom = sum(math.exp(x) for x in v)
    oracle = [math.exp(x) / denom for x in v]
    assert np.max(np.abs(softmax(np.array(v)) - oracle)) < 1e-6
    assert torch.allclose(softmax(torch.tensor(v, dtype=torch.float64)), torch.tensor(oracle, dtype=torch.float64))


def test_softmax_empty_raises():
    with pytest.raises(ValueError):
        softmax(np.array([]))
    with pytest.raises(ValueError):
        softmax(torch.tensor([]))


@given(arrays(np.float64, st.integers(1, 12), elements=finite), st.floats(-100, 100))
def test_softmax_properties(v, c):
    p = softmax(v)
    assert np.all(p > 0)
    assert abs(p.sum() - 1) < 1e-6
    q = softmax(v + c)
    assert np.max(np.abs(p - q)) < 1e-6
    assert np.argmax(p) == np.argmax(q)


def test_softmax_extreme_values_stable():
    p = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)


# -- layer_norm ---------------------------------------------------------------

def test_layer_norm_constant_is_zero():
    assert np.array_equal(layer_norm(np.array([5.0, 5.0, 5.0])), np.zeros(3))


def test_layer_norm_already_normalized():
    assert np.allclose(layer_norm(np.array([1.0, -1.0])), [1.0, -1.0], atol=1e-5)


def test_layer_norm_random_vector_oracle(rng):
    x = rng.normal(16, 3.0, np.float64) + 2.0
    y = layer_norm(x)
    mu = sum(x) / 16
    var = sum((xi - mu) ** 2 for xi in x) / 16
    oracle = [(xi - mu) / math.sqrt(var + 1e-6) for xi in x]
    assert np.max(np.abs(y - oracle)) < 1e-12
    assert abs(y.mean()) < 1e-5 and abs(y.var() - 1) < 1e-5


def test_layer_norm_torch_matches_numpy(rng):
    x = rng.normal((3, 8), 1.0, np.float64)
    assert np.allclose(layer_norm(torch.from_numpy(x)).numpy(), layer_norm(x), atol=1e-12)


# -- gradients ------------------------------------------------------------------

def test_grad_square():
    (g,) = grad(lambda w: w ** 2, [torch.tensor(3.0, dtype=torch.float64)])
    assert float(g) == 6.0


def test_grad_softmax_first_component():
    f = lambda w: torch.softmax(w, 0)[0]
    (g,) = grad(f, [torch.zeros(2, dtype=torch.float64)])
    fd = finite_diff_grad(lambda x: float(torch.softmax(torch.from_numpy(x), 0)[0]), np.zeros(2))
    assert np.allclose(g.numpy(), [0.25, -0.25], atol=1e-12)
    assert np.allclose(fd, [0.25, -0.25], atol=1e-8)


def test_grad_rejects_non_scalar():
    with pytest.raises(ValueError):
        grad(lambda w: w * 2, [torch.ones(3)])


def test_grad_unused_param_is_zero():
    g = grad(lambda a, b: (a ** 2).sum(), [torch.ones(2), torch.ones(3)])
    assert torch.equal(g[1], torch.zeros(3))


def test_finite_diff_sum_and_dot():
    assert np.allclose(finite_diff_grad(lambda x: x.sum(), np.array([0.3, -2.0, 5.0])), 1.0)
    assert np.allclose(finite_diff_grad(lambda x: x @ x, np.array([1.0, 2.0])), [2.0, 4.0])


def test_finite_diff_step_sweep_agrees():
    f = lambda x: float(np.sin(x).sum() + (x ** 3).sum())
    x = np.array([0.1, 0.7, -1.3])
    assert np.max(np.abs(finite_diff_grad(f, x, 1e-3) - finite_diff_grad(f, x, 1e-4))) < 1e-5


@pytest.mark.parametrize("h", [1e-6, 0.1])
def test_finite_diff_rejects_step(h):
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: x.sum(), np.zeros(2), h)


def test_finite_diff_at_matches_full():
    f = lambda x: float((x ** 2 * np.arange(1, 6)).sum())
    x = np.linspace(-1, 1, 5)
    assert np.allclose(finite_diff_at(f, x, [1, 3]), finite_diff_grad(f, x)[[1, 3]])


def test_autograd_vs_finite_diff_composite(rng):
    w = rng.normal((4, 3), 1.0, np.float64)
    x = rng.normal((5, 4), 1.0, np.float64)

    def f(wt):
        return (torch.softmax(torch.from_numpy(x) @ wt, -1) ** 2).sum()

    (g,) = grad(f, [torch.from_numpy(w)])
    fd = finite_diff_grad(lambda a: float(f(torch.from_numpy(a))), w, 1e-5)
    assert relative_error(g.numpy(), fd) <= 1e-4


def test_relative_error_basics():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([0.0], [0.0]) == 0.0
    assert relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)


# -- matrix square root ---------------------------------------------------------

def test_sqrt_identity_and_diagonal():
    assert np.allclose(matrix_sqrt_psd(np.eye(3)), np.eye(3))
    assert np.allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))


@given(st.integers(0, 2**31))
def test_sqrt_reconstructs_random_psd(seed):
    m = Rng(seed).normal((4, 4), 1.0, np.float64)
    a = m.T @ m
    b = matrix_sqrt_psd(a)
    assert np.allclose(b, b.T, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(b)) >= -1e-10
    assert np.linalg.norm(b @ b - a) <= 1e-5 * (1 + np.linalg.norm(a))


def test_sqrt_matches_scipy_oracle(rng):
    from scipy.linalg import sqrtm
    m = rng.normal((5, 5), 1.0, np.float64)
    a = m @ m.T + 0.1 * np.eye(5)
    assert np.allclose(matrix_sqrt_psd(a), np.real(sqrtm(a)), atol=1e-8)


def test_sqrt_clamps_tiny_negative_eigenvalues():
    a = np.diag([1.0, -1e-9])
    assert np.allclose(matrix_sqrt_psd(a), np.diag([1.0, 0.0]))


def test_sqrt_rejects_asymmetric():
    with pytest.raises(ValueError):
        matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


# -- finiteness and OSTN ----------------------------------------------------------

def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError):
        check_finite(torch.tensor([float("inf")]))


def test_ostn_header_layout():
    raw = ostn_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert raw[:4] == OSTN_MAGIC
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:16] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.array_equal(np.frombuffer(raw[16:], "<f4"), np.arange(6, dtype=np.float32))


@given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_ostn_round_trip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("ostn") / "t.ostn"
    write_ostn(path, a)
    b = read_ostn(path)
    assert b.shape == a.shape and np.array_equal(a, b)


def test_ostn_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ostn"
    p.write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValueError):
        read_ostn(p)


def test_ostn_rejects_truncated_payload(tmp_path):
    p = tmp_path / "short.ostn"
    p.write_bytes(ostn_bytes(np.ones(4, np.float32))[:-2])
    with pytest.raises(ValueError):
        read_ostn(p)


def test_ostn_accepts_torch(tmp_path):
    write_ostn(tmp_path / "t.ostn", torch.ones(2, 2))
    assert np.array_equal(read_ostn(tmp_path / "t.ostn"), np.ones((2, 2), np.float32))


def test_flatten_params():
    out = flatten_params([torch.ones(2, 2), torch.zeros(3)])
    assert out.shape == (7,) and float(out.sum()) == 4.0
