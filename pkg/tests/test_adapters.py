import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tensorpoly import oracles
from tensorpoly.adapters import (
    AdapterLayer,
    LoRAAdapter,
    TLoRAFactors,
    adapter_param_count,
    dense_equivalent,
    flop_extra,
    lora_forward,
    param_count,
    tensorized_vector_count,
    tlora_forward,
    tlora_materialize,
)
from tensorpoly.tensor_core import FactorVectorSet, TensorDims, entangled_reconstruct, min_base


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


def test_lora_by_hand():
    layer = AdapterLayer(np.eye(2), LoRAAdapter([[1.0], [0.0]], [[0.0], [1.0]], 1.0))
    np.testing.assert_array_equal(lora_forward(layer, [3.0, 5.0]), [8.0, 5.0])


def test_lora_zero_adapter_is_base():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(5, 4))
    x = rng.normal(size=4)
    layer = AdapterLayer(w0, LoRAAdapter(np.zeros((5, 2)), rng.normal(size=(4, 2))))
    np.testing.assert_array_equal(lora_forward(layer, x), w0 @ x)


def test_lora_random_matches_dense():
    rng = np.random.default_rng(1)
    w0, A, B, x = rng.normal(size=(4, 4)), rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.normal(size=4)
    h = lora_forward(AdapterLayer(w0, LoRAAdapter(A, B, 2.0)), x)
    assert rel_err(h, (w0 + 2.0 * A @ B.T) @ x) <= 1e-12


def test_lora_errors():
    with pytest.raises(ValueError):
        LoRAAdapter(np.ones((3, 2)), np.ones((3, 1)))
    with pytest.raises(ValueError):
        LoRAAdapter(np.ones((3, 2)), np.ones((3, 2)), s=0.0)
    layer = AdapterLayer(np.eye(3), LoRAAdapter(np.ones((3, 1)), np.ones((3, 1))))
    with pytest.raises(ValueError):
        lora_forward(layer, np.ones(4))


def test_scale_below_one_warns(caplog):
    with caplog.at_level(logging.WARNING):
        LoRAAdapter(np.ones((2, 1)), np.ones((2, 1)), s=0.5)
    assert "below 1" in caplog.text


def test_base_weight_frozen():
    w0 = np.eye(3)
    layer = AdapterLayer(w0, None)
    w0[0, 0] = 7.0  # caller's array is copied
    assert layer.w0[0, 0] == 1.0
    with pytest.raises(ValueError):
        layer.w0[0, 0] = 2.0
    assert layer.base_unchanged()


def _factors(rng, dims, integer=False):
    draw = (lambda s: rng.integers(-3, 4, size=s).astype(float)) if integer else (lambda s: rng.normal(size=s))
    return TLoRAFactors(draw((dims.N, dims.r, dims.q_out, dims.R)), draw((dims.N, dims.r, dims.q_in, dims.R)), dims)


def test_tlora_order_one_rank_one_is_copy():
    rng = np.random.default_rng(2)
    dims = TensorDims(d_in=5, d_out=6, r=3, N=1, R=1)
    f = _factors(rng, dims)
    np.testing.assert_array_equal(tlora_materialize(f, "A"), f.a_factors[0, :, :, 0].T)
    np.testing.assert_array_equal(tlora_materialize(f, "B"), f.b_factors[0, :, :, 0].T)


def test_tlora_625_geometry():
    dims = TensorDims.square(625, 5, 4, 3)
    assert dims.q_in == 5
    f = _factors(np.random.default_rng(0), dims)
    assert tlora_materialize(f, "A").shape == (625, 5)
    assert f.a_factors.size == 300 and 625 * 5 == 3125


def test_tlora_columns_match_entangled_oracle():
    rng = np.random.default_rng(3)
    dims = TensorDims.square(8, 2, 3, 2)
    f = _factors(rng, dims, integer=True)
    A = tlora_materialize(f, "A")
    for c in range(2):
        per_col = f.a_factors[:, c, :, :].transpose(2, 0, 1)  # (R, N, q)
        np.testing.assert_array_equal(A[:, c], entangled_reconstruct(FactorVectorSet(per_col, 8)))
        np.testing.assert_array_equal(A[:, c], oracles.brute_entangled(per_col.tolist(), 8))


def test_tlora_forward_cases():
    rng = np.random.default_rng(4)
    dims = TensorDims(d_in=9, d_out=9, r=2, N=2, R=2)
    w0, x = rng.normal(size=(9, 9)), rng.normal(size=9)
    zero = TLoRAFactors(np.zeros((2, 2, 3, 2)), np.zeros((2, 2, 3, 2)), dims)
    np.testing.assert_array_equal(tlora_forward(AdapterLayer(w0, zero), x), w0 @ x)
    f = _factors(rng, dims)
    A, B = tlora_materialize(f, "A"), tlora_materialize(f, "B")
    h = tlora_forward(AdapterLayer(w0, f), x)
    assert rel_err(h, lora_forward(AdapterLayer(w0, LoRAAdapter(A, B)), x)) <= 1e-12


def test_tlora_degenerates_to_lora():
    rng = np.random.default_rng(5)
    dims = TensorDims(d_in=4, d_out=6, r=2, N=1, R=1)
    f = _factors(rng, dims)
    w0, x = rng.normal(size=(6, 4)), rng.normal(size=4)
    lora = LoRAAdapter(f.a_factors[0, :, :, 0].T.copy(), f.b_factors[0, :, :, 0].T.copy())
    np.testing.assert_array_equal(tlora_forward(AdapterLayer(w0, f), x), lora_forward(AdapterLayer(w0, lora), x))


def test_tlora_shape_errors():
    dims = TensorDims.square(9, 2, 2, 2)
    with pytest.raises(ValueError):
        TLoRAFactors(np.ones((2, 2, 4, 2)), np.ones((2, 2, 3, 2)), dims)
    f = TLoRAFactors(np.ones((2, 2, 3, 2)), np.ones((2, 2, 3, 2)), dims)
    with pytest.raises(ValueError):
        tlora_forward(AdapterLayer(np.eye(8), f), np.ones(8))


def test_param_count_examples():
    assert tensorized_vector_count(512, 3, 2) == 48
    assert param_count("tlora", d=1024, r=4, N=2, R=8) == 4096
    assert param_count("poly", "pretrain", d=8, r=2, S=4, T=10) == 168
    assert param_count("poly", "finetune", d=8, r=2, S=4) == 132
    assert param_count("lora", d=512, r=4) == 4096
    assert param_count("fullft", d=16) == 256
    assert param_count("tp2", "pretrain", d=512, r=4, N=2, R=8, T=10) == 3104
    assert param_count("tp1", "pretrain", d=512, r=4, N=2, R=8, T=10) == 2944 + 80
    assert param_count("tp1", "finetune", d=512, r=4, N=2, R=8) == 2944 + 8
    assert param_count("tp2", "finetune", d=512, r=4, N=2, R=8) == 2944 + 16


def test_param_count_missing_argument():
    with pytest.raises(ValueError):
        param_count("lora", d=512)
    with pytest.raises(ValueError):
        param_count("tp1", "pretrain", d=512, r=4, N=2, R=8)
    with pytest.raises(ValueError):
        param_count("nope", d=4)


@given(st.integers(1, 2048), st.integers(1, 8), st.integers(1, 4), st.integers(1, 8), st.integers(1, 30))
def test_table_rows_closed_form(d, r, N, R, T):
    q = min_base(d, N)
    base = 2 * N * r * q * R
    assert param_count("tlora", "pretrain", d=d, r=r, N=N, R=R) == base
    assert param_count("tp1", "pretrain", d=d, r=r, N=N, R=R, T=T) == base + T * R
    assert param_count("tp2", "pretrain", d=d, r=r, N=N, R=R, T=T) == base + T * R * N
    assert param_count("poly", "pretrain", d=d, r=r, S=R, T=T) == 2 * d * r * R + T * R
    assert param_count("lora", "pretrain", d=d, r=r) == 2 * d * r


def test_rectangular_and_tt_counts():
    dims = TensorDims(d_in=9, d_out=16, r=2, N=2, R=3)
    assert adapter_param_count("tlora", dims, "finetune") == 2 * 2 * (3 + 4) * 3
    # TT cores: (1,4,3,3) + (3,4,1,3)
    assert adapter_param_count("tpx", dims, "finetune") == 36 + 36 + 3
    assert dense_equivalent("tlora", 512, 4) == 4096


@pytest.mark.parametrize("args,out", [((625, 5, 3), 9375), ((1, 1, 1), 1), ((512, 4, 2), 4096)])
def test_flop_extra(args, out):
    assert flop_extra(*args) == out


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_forward_linear_in_x(seed, a, b):
    rng = np.random.default_rng(seed)
    dims = TensorDims.square(9, 2, 2, 2)
    layer = AdapterLayer(rng.normal(size=(9, 9)), _factors(rng, dims))
    x, y = rng.normal(size=9), rng.normal(size=9)
    lhs = tlora_forward(layer, a * x + b * y)
    rhs = a * tlora_forward(layer, x) + b * tlora_forward(layer, y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(rhs)))


@given(st.integers(64, 4096), st.integers(1, 8), st.integers(2, 4), st.integers(1, 8))
def test_tlora_smaller_when_factored_length_short(d, r, N, R):
    q = min_base(d, N)
    lora = param_count("lora", d=d, r=r)
    tlora = param_count("tlora", d=d, r=r, N=N, R=R)
    assert (tlora < lora) == (N * q * R < d)


def test_tlora_smaller_at_large_scale():
    for d in (2048, 2560):
        assert param_count("tlora", d=d, r=4, N=2, R=8) < param_count("lora", d=d, r=4)
