import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixq.adapters import LoftqInit, LoraAdapter, lora_forward, loftq_init, truncated_svd
from mixq.quantizer import build_codebook, dequantize, quantize
from oracles import jacobi_singular_values

NF4 = build_codebook(4, "nf")


def test_param_count():
    ad = LoraAdapter.gaussian(7, 5, 3, np.random.default_rng(0))
    assert ad.n_params == 3 * (7 + 5)
    assert np.all(ad.B == 0)
    assert LoraAdapter.zeros(4, 4).n_params == 0


def test_lora_forward_zero_adapter_matches_frozen():
    rng = np.random.default_rng(0)
    Q = quantize(rng.normal(size=(5, 4)), NF4, 8)
    X = rng.normal(size=(4, 3))
    b = rng.normal(size=5)
    out = lora_forward(Q, LoraAdapter(np.zeros((5, 2)), rng.normal(size=(2, 4))), X, b)
    np.testing.assert_array_equal(out, dequantize(Q) @ X + b[:, None])


def test_lora_forward_zero_input_returns_bias():
    rng = np.random.default_rng(1)
    Q = quantize(rng.normal(size=(5, 4)), NF4, 8)
    ad = LoraAdapter(rng.normal(size=(5, 2)), rng.normal(size=(2, 4)))
    b = rng.normal(size=5)
    out = lora_forward(Q, ad, np.zeros((4, 2)), b)
    np.testing.assert_array_equal(out, np.tile(b[:, None], (1, 2)))


def test_lora_forward_dense_oracle():
    rng = np.random.default_rng(2)
    Q = quantize(rng.normal(size=(6, 6)), build_codebook(8, "uniform"), 64)
    ad = LoraAdapter(rng.normal(size=(6, 2)), rng.normal(size=(2, 6)))
    X = rng.normal(size=(6, 5))
    b = rng.normal(size=6)
    Wd = dequantize(Q)
    expected = np.empty((6, 5))
    for i in range(6):
        for j in range(5):
            acc = b[i]
            for k in range(6):
                acc += (Wd[i, k] + sum(ad.A[i, t] * ad.B[t, k] for t in range(2))) * X[k, j]
            expected[i, j] = acc
    np.testing.assert_allclose(lora_forward(Q, ad, X, b), expected, rtol=0, atol=1e-12)


def test_lora_forward_shape_errors():
    Q = quantize(np.ones((3, 2)), NF4, 4)
    with pytest.raises(ValueError):
        lora_forward(Q, LoraAdapter.zeros(3, 2, 1), np.ones((3, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        lora_forward(Q, LoraAdapter.zeros(2, 2, 1), np.ones((2, 1)), np.zeros(3))


def test_truncated_svd_tail_energy():
    rng = np.random.default_rng(0)
    R = rng.normal(size=(8, 5))
    A, B = truncated_svd(R, 2)
    assert A.shape == (8, 2) and B.shape == (2, 5)
    sigma = jacobi_singular_values(R)
    err = np.linalg.norm(R - A @ B) ** 2
    assert abs(err - np.sum(sigma[2:] ** 2)) <= 1e-9


def test_truncated_svd_recovers_rank_one():
    u = np.array([1.0, -2.0, 0.5])
    v = np.array([3.0, 1.0, -1.0, 2.0])
    A, B = truncated_svd(np.outer(u, v), 1)
    np.testing.assert_allclose(A @ B, np.outer(u, v), atol=1e-12)
    assert A[0, 0] > 0


def test_truncated_svd_sign_rule():
    rng = np.random.default_rng(4)
    A, B = truncated_svd(rng.normal(size=(6, 6)), 4)
    for i in range(4):
        col = A[:, i]
        assert col[np.flatnonzero(np.abs(col) > 1e-12)[0]] > 0
    np.testing.assert_allclose(np.linalg.norm(A, axis=0), np.linalg.norm(B, axis=1), rtol=1e-12)


def test_truncated_svd_rejects_bad_rank():
    with pytest.raises(ValueError):
        truncated_svd(np.ones((3, 2)), 3)
    with pytest.raises(ValueError):
        truncated_svd(np.array([[np.nan, 1.0]]), 1)


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 8),
    cols=st.integers(1, 8),
    seed=st.integers(0, 2**31),
    data=st.data(),
)
def test_truncated_svd_optimal(rows, cols, seed, data):
    r = data.draw(st.integers(0, min(rows, cols)))
    R = np.random.default_rng(seed).normal(size=(rows, cols))
    A, B = truncated_svd(R, r)
    sigma = jacobi_singular_values(R)
    assert abs(np.linalg.norm(R - A @ B) ** 2 - np.sum(sigma[r:] ** 2)) <= 1e-9


def test_loftq_rank_zero_is_plain_quantization():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(6, 7))
    init = loftq_init(W, NF4, 16, r=0, T=1)
    assert init.adapter.rank == 0
    assert init.Q == quantize(W, NF4, 16)
    assert init.residual_norm == pytest.approx(np.linalg.norm(W - dequantize(quantize(W, NF4, 16))))


def test_loftq_exactly_representable():
    cb = build_codebook(4, "uniform")
    W = np.array([[-1.0, 1.0], [1.0, -1.0]])
    init = loftq_init(W, cb, 4, r=1, T=1)
    assert init.residual_norm <= 1e-15
    np.testing.assert_allclose(dequantize(init.Q) + init.adapter.delta(), W, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_loftq_beats_plain_quantization(seed):
    W = np.random.default_rng(seed).normal(size=(16, 16))
    init = loftq_init(W, NF4, 64, r=4, T=1)
    plain = np.linalg.norm(W - dequantize(quantize(W, NF4, 64)))
    assert init.residual_norm <= plain + 1e-12
    direct = np.linalg.norm(W - dequantize(init.Q) - init.adapter.delta())
    assert direct == pytest.approx(init.residual_norm, rel=1e-12)


def test_loftq_deterministic_and_serializable():
    W = np.random.default_rng(9).normal(size=(8, 12))
    a = loftq_init(W, NF4, 16, r=3, T=3)
    b = loftq_init(W, NF4, 16, r=3, T=3)
    assert a.to_bytes() == b.to_bytes()
    assert len(a.history) == 3
    back = LoftqInit.load(io.BytesIO(a.to_bytes()))
    assert back.Q == a.Q and back.history == a.history
    np.testing.assert_array_equal(back.adapter.A, a.adapter.A)


def test_loftq_requires_positive_T():
    with pytest.raises(ValueError):
        loftq_init(np.ones((2, 2)), NF4, r=1, T=0)
