import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mixq.quantizer import (
    Codebook,
    CodebookKind,
    QuantizedMatrix,
    build_codebook,
    dequantize,
    dump_quantized,
    load_quantized,
    pack_codes,
    quantize,
    simulated_matmul,
    unpack_codes,
)
from oracles import nearest_index

KINDS = [
    (4, CodebookKind.UNIFORM),
    (8, CodebookKind.UNIFORM),
    (4, CodebookKind.NORMAL_FLOAT),
    (8, CodebookKind.NORMAL_FLOAT),
    (4, CodebookKind.FP4),
]


def test_uniform_4bit_endpoints_and_spacing():
    cb = build_codebook(4, "uniform")
    assert cb.values[0] == -1.0 and cb.values[15] == 1.0
    np.testing.assert_allclose(np.diff(cb.values), 2 / 15, rtol=1e-12)


def test_uniform_8bit_spacing():
    cb = build_codebook(8, CodebookKind.UNIFORM)
    assert len(cb.values) == 256
    assert cb.values[128] - cb.values[127] == pytest.approx(2 / 255, rel=1e-12)


@pytest.mark.parametrize("bits", [4, 8])
def test_normal_float_symmetric_unit_range(bits):
    cb = build_codebook(bits, "nf")
    assert cb.values[0] == -1.0 and cb.values[-1] == 1.0
    np.testing.assert_array_equal(cb.values, -cb.values[::-1])
    assert np.all(np.diff(cb.values) > 0)


def test_normal_float_matches_quantile_formula():
    from scipy.stats import norm

    n = 16
    delta = 1 / (2 * (n + 1))
    i = np.arange(n)
    expected = norm.ppf(delta + i * (1 - 2 * delta) / (n - 1)) / norm.ppf(1 - delta)
    np.testing.assert_allclose(build_codebook(4, "nf").values, expected, atol=1e-14)


def test_fp4_table():
    cb = build_codebook(4, "fp4")
    mags = np.array([0, 0.5, 1, 1.5, 2, 3, 4, 6]) / 6
    assert len(set(cb.values.tolist())) == 15
    assert sorted(set(np.abs(cb.values).tolist())) == sorted(mags.tolist())
    assert np.count_nonzero(cb.values == 0.0) == 2
    assert np.all(np.diff(cb.values) >= 0)


@pytest.mark.parametrize("bits,kind", [(2, "uniform"), (16, "nf"), (8, "fp4")])
def test_unsupported_combinations(bits, kind):
    with pytest.raises(ValueError):
        build_codebook(bits, kind)


def test_zero_matrix():
    Q = quantize(np.zeros((3, 5)), build_codebook(4, "uniform"), 4)
    assert np.all(Q.scales == 0)
    np.testing.assert_array_equal(dequantize(Q), np.zeros((3, 5)))


def test_three_element_block():
    cb = build_codebook(4, "uniform")
    W = np.array([[-3.0, 0.0, 3.0]])
    Q = quantize(W, cb, block_size=3)
    assert Q.scales.tolist() == [3.0]
    expected = [nearest_index(cb.values, x / 3.0) for x in W.ravel()]
    assert Q.codes.tolist() == expected
    assert expected[0] == 0 and expected[2] == 15 and expected[1] in (7, 8)
    assert np.max(np.abs(dequantize(Q) - W)) <= 0.2 + 1e-15


def test_single_element_exact():
    Q = quantize(np.array([[5.0]]), build_codebook(4, "uniform"), 1)
    assert Q.scales.tolist() == [5.0]
    assert Q.codes.tolist() == [15]
    assert dequantize(Q)[0, 0] == 5.0


def test_ties_go_to_lower_index():
    cb = Codebook(4, np.linspace(-1, 1, 16), CodebookKind.UNIFORM)
    mid = 0.5 * (cb.values[3] + cb.values[4])
    # only an exact tie counts; construct one via a 2-entry distance check
    if abs(mid - cb.values[3]) == abs(mid - cb.values[4]):
        assert cb.nearest(np.array([mid]))[0] == 3


@pytest.mark.parametrize("bits,kind", KINDS)
def test_encoding_is_exhaustive_argmin(bits, kind):
    rng = np.random.default_rng(bits * 10 + int(kind))
    W = rng.normal(size=(7, 9)) * rng.uniform(0.1, 5)
    cb = build_codebook(bits, kind)
    Q = quantize(W, cb, 16)
    flat = W.ravel()
    for i, x in enumerate(flat):
        s = Q.scales[i // 16]
        assert Q.codes[i] == nearest_index(cb.values, x / s)


def test_dequantize_rejects_corrupt_codes():
    cb = build_codebook(4, "uniform")
    Q = QuantizedMatrix(1, 2, np.array([3, 16]), 2, np.array([1.0]), cb)
    with pytest.raises(ValueError):
        dequantize(Q)


def test_dequantize_is_exact_lookup():
    cb = build_codebook(4, "nf")
    zero_code = int(np.argmin(np.abs(cb.values)))
    Q = QuantizedMatrix(2, 2, np.full(4, zero_code), 2, np.array([2.5, 7.0]), cb)
    out = dequantize(Q)
    assert out.tolist() == [[2.5 * cb.values[zero_code]] * 2, [7.0 * cb.values[zero_code]] * 2]


def test_simulated_matmul():
    rng = np.random.default_rng(3)
    Q = quantize(rng.normal(size=(6, 5)), build_codebook(8, "uniform"), 8)
    np.testing.assert_array_equal(simulated_matmul(Q, np.eye(5)), dequantize(Q))
    np.testing.assert_array_equal(simulated_matmul(Q, np.zeros((5, 3))), np.zeros((6, 3)))
    X = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(simulated_matmul(Q, X), dequantize(Q) @ X)
    with pytest.raises(ValueError):
        simulated_matmul(Q, np.ones((4, 4)))


matrices = arrays(
    np.float64,
    st.tuples(st.integers(1, 9), st.integers(1, 9)),
    elements=st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, allow_subnormal=False),
)


@settings(max_examples=60, deadline=None)
@given(W=matrices, block=st.sampled_from([1, 3, 16, 64]), which=st.sampled_from(range(len(KINDS))))
def test_idempotence(W, block, which):
    cb = build_codebook(*KINDS[which])
    Q = quantize(W, cb, block)
    Q2 = quantize(dequantize(Q), cb, block)
    np.testing.assert_array_equal(Q.codes, Q2.codes)
    np.testing.assert_array_equal(Q.scales, Q2.scales)


@settings(max_examples=60, deadline=None)
@given(W=matrices, block=st.sampled_from([1, 3, 16, 64]), bits=st.sampled_from([4, 8]))
def test_uniform_roundtrip_bound(W, block, bits):
    Q = quantize(W, build_codebook(bits, "uniform"), block)
    err = np.abs(dequantize(Q) - W).ravel()
    scales = np.repeat(Q.scales, block)[: W.size]
    assert np.all(err <= scales / (2**bits - 1) * (1 + 1e-12) + 1e-300)


@settings(max_examples=40, deadline=None)
@given(W=matrices, block=st.sampled_from([1, 4, 64]))
def test_monotone_precision(W, block):
    e4 = np.mean((dequantize(quantize(W, build_codebook(4, "uniform"), block)) - W) ** 2)
    e8 = np.mean((dequantize(quantize(W, build_codebook(8, "uniform"), block)) - W) ** 2)
    assert e8 <= e4 * (1 + 1e-12) + 1e-300


def test_scale_invariants():
    rng = np.random.default_rng(0)
    W = rng.normal(size=(10, 13))
    W[0, :] = 0.0
    Q = quantize(W, build_codebook(4, "nf"), 13)
    assert Q.n_blocks == 10
    assert Q.scales[0] == 0.0 and np.all(Q.scales[1:] > 0)


def test_pack_codes_lsb_first():
    assert pack_codes(np.array([1, 2, 15]), 4) == bytes([0x21, 0x0F])
    assert pack_codes(np.array([0xAB, 0x01]), 8) == bytes([0xAB, 0x01])
    np.testing.assert_array_equal(unpack_codes(bytes([0x21, 0x0F]), 4, 3), [1, 2, 15])


def test_binary_layout():
    cb = build_codebook(4, "uniform")
    Q = QuantizedMatrix(1, 3, np.array([1, 2, 15]), 2, np.array([0.5, 2.0]), cb)
    blob = dump_quantized(Q)
    assert blob[:14] == struct.pack("<IIBBI", 1, 3, 4, 0, 2)
    assert blob[14:30] == struct.pack("<dd", 0.5, 2.0)
    assert blob[30:] == bytes([0x21, 0x0F])
    assert load_quantized(blob) == Q


@pytest.mark.parametrize("bits,kind", KINDS)
def test_serialization_roundtrip(bits, kind):
    rng = np.random.default_rng(11)
    Q = quantize(rng.normal(size=(5, 7)), build_codebook(bits, kind), 6)
    back = QuantizedMatrix.from_bytes(Q.to_bytes())
    assert back == Q
    np.testing.assert_array_equal(dequantize(back), dequantize(Q))


def test_load_rejects_truncated():
    Q = quantize(np.ones((2, 2)), build_codebook(8, "uniform"), 2)
    with pytest.raises(ValueError):
        load_quantized(Q.to_bytes()[:-1])
