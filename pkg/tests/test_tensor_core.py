import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tensorpoly import oracles
from tensorpoly.tensor_core import (
    FactorVectorSet,
    TensorDims,
    TensorTrainCores,
    entangled_reconstruct,
    kron_batch,
    kron_batch_grad,
    kron_prefixes,
    min_base,
    simple_tensor,
    tt_contract,
    tt_contract_weighted,
)


def brute_min_base(d, N):
    q = 1
    while q**N < d:
        q += 1
    return q


@pytest.mark.parametrize("d,N,q", [(625, 4, 5), (512, 3, 8), (7, 1, 7), (1, 5, 1), (626, 4, 6), (9, 2, 3)])
def test_min_base_examples(d, N, q):
    assert min_base(d, N) == q


@given(st.integers(1, 5000), st.integers(1, 6))
def test_min_base_is_least(d, N):
    assert min_base(d, N) == brute_min_base(d, N)


def test_min_base_rejects_nonpositive():
    with pytest.raises(ValueError):
        min_base(0, 2)
    with pytest.raises(ValueError):
        min_base(4, 0)


def test_simple_tensor_examples():
    np.testing.assert_array_equal(simple_tensor([[1, 2], [3, 4]]), [3, 4, 6, 8])
    np.testing.assert_array_equal(simple_tensor([[2.5]]), [2.5])
    x, y, u, v = 2.0, 3.0, 5.0, 7.0
    np.testing.assert_array_equal(simple_tensor([[1, 0], [x, y], [u, v]]),
                                  [x * u, x * v, y * u, y * v, 0, 0, 0, 0])


def test_simple_tensor_empty_and_nonfinite():
    with pytest.raises(ValueError):
        simple_tensor([])
    with pytest.raises(ValueError):
        simple_tensor([[1.0, np.nan]])


@given(st.lists(st.lists(st.integers(-4, 4), min_size=1, max_size=4), min_size=1, max_size=4))
def test_simple_tensor_matches_oracle(vectors):
    out = simple_tensor(vectors)
    assert out.size == int(np.prod([len(v) for v in vectors]))
    np.testing.assert_array_equal(out, oracles.brute_simple_tensor(vectors))


def test_entangled_examples():
    fs = FactorVectorSet(np.array([[[5, -2, 0]]], dtype=float), 3)
    np.testing.assert_array_equal(entangled_reconstruct(fs), [5, -2, 0])
    fac = np.array([[[1, 0], [1, 0]], [[0, 1], [0, 1]]], dtype=float)
    np.testing.assert_array_equal(entangled_reconstruct(FactorVectorSet(fac, 4)), [1, 0, 0, 1])


def test_entangled_integer_oracle():
    rng = np.random.default_rng(3)
    fac = rng.integers(-5, 6, size=(2, 3, 2)).astype(float)
    np.testing.assert_array_equal(entangled_reconstruct(FactorVectorSet(fac, 7)),
                                  oracles.brute_entangled(fac.tolist(), 7))


def test_factor_set_validation():
    with pytest.raises(ValueError):
        FactorVectorSet(np.ones((2, 3, 4)), 20)  # q should be 3 for d=20, N=3
    with pytest.raises(ValueError):
        FactorVectorSet(np.ones((2, 3)), 8)
    fs = FactorVectorSet(np.ones((1, 2, 2)), 4)
    with pytest.raises(ValueError):
        fs.factors[0, 0, 0] = 3.0


@st.composite
def factor_sets(draw):
    N = draw(st.integers(1, 3))
    R = draw(st.integers(1, 3))
    d = draw(st.integers(1, 40))
    q = min_base(d, N)
    seed = draw(st.integers(0, 2**31))
    fac = np.random.default_rng(seed).integers(-3, 4, size=(R, N, q)).astype(float)
    return fac, d


@given(factor_sets(), st.integers(-3, 3), st.data())
def test_multilinearity(fs_d, c, data):
    fac, d = fs_d
    R, N, _ = fac.shape
    k = data.draw(st.integers(0, R - 1))
    i = data.draw(st.integers(0, N - 1))
    per_rank = [entangled_reconstruct(FactorVectorSet(fac[j:j + 1], d)) for j in range(R)]
    scaled = fac.copy()
    scaled[k, i] *= c
    expect = sum(per_rank[j] * (c if j == k else 1) for j in range(R))
    np.testing.assert_array_equal(entangled_reconstruct(FactorVectorSet(scaled, d)), expect)


@given(factor_sets())
def test_lengths_and_truncation(fs_d):
    fac, d = fs_d
    R, N, q = fac.shape
    out = entangled_reconstruct(FactorVectorSet(fac, d))
    assert out.shape == (d,)
    if q**N == d:
        full = sum(simple_tensor(list(fac[k])) for k in range(R))
        np.testing.assert_array_equal(out, full)


def test_kron_batch_and_grad():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 2, 4))
    out = kron_batch(f)
    for b in range(2):
        np.testing.assert_allclose(out[b], simple_tensor([f[i, b] for i in range(3)]), rtol=1e-14)
    g = rng.normal(size=out.shape)
    grad = kron_batch_grad(f, kron_prefixes(f), g)
    eps = 1e-6
    for idx in [(0, 1, 2), (1, 0, 3), (2, 1, 0)]:
        fp, fm = f.copy(), f.copy()
        fp[idx] += eps
        fm[idx] -= eps
        num = (np.sum(kron_batch(fp) * g) - np.sum(kron_batch(fm) * g)) / (2 * eps)
        assert abs(num - grad[idx]) < 1e-7


def _random_tt(rng, N, q, R, integer=True):
    bonds = [1] + [R] * (N - 1) + [1]
    draw = (lambda s: rng.integers(-3, 4, size=s).astype(float)) if integer else (lambda s: rng.normal(size=s))
    return [draw((bonds[i], q, bonds[i + 1], q)) for i in range(N)]


def test_tt_single_core():
    core = np.arange(9.0).reshape(1, 3, 1, 3)
    np.testing.assert_array_equal(tt_contract(TensorTrainCores((core,))), core.reshape(3, 3))


def test_tt_rank_one_is_kronecker():
    rng = np.random.default_rng(1)
    for N in (2, 3):
        cores = _random_tt(rng, N, 2, 1)
        expect = cores[0][0, :, 0, :]
        for c in cores[1:]:
            expect = np.kron(expect, c[0, :, 0, :])
        np.testing.assert_array_equal(tt_contract(TensorTrainCores(tuple(cores))), expect)


def test_tt_integer_oracle():
    rng = np.random.default_rng(2)
    cores = _random_tt(rng, 3, 2, 2)
    np.testing.assert_array_equal(tt_contract(TensorTrainCores(tuple(cores))), oracles.brute_tt(cores))


def test_tt_weighted():
    rng = np.random.default_rng(4)
    cores = _random_tt(rng, 3, 2, 2, integer=False)
    tt = TensorTrainCores(tuple(cores))
    np.testing.assert_allclose(tt_contract_weighted(tt, np.ones((2, 2))), tt_contract(tt), rtol=0, atol=0)
    alpha = rng.random((2, 2))
    ref = oracles.brute_tt(cores, alpha)
    err = np.max(np.abs(tt_contract_weighted(tt, alpha) - ref)) / np.max(np.abs(ref))
    assert err <= 1e-12
    # one-hot per level selects a single bond path
    onehot = np.array([[0.0, 1.0], [1.0, 0.0]])
    sliced = (cores[0][:, :, 1:2, :], cores[1][1:2, :, 0:1, :], cores[2][0:1])
    np.testing.assert_allclose(tt_contract_weighted(tt, onehot), tt_contract(TensorTrainCores(sliced)),
                               rtol=0, atol=1e-14)


def test_tt_validation():
    a = np.ones((1, 2, 3, 2))
    b = np.ones((2, 2, 1, 2))
    with pytest.raises(ValueError):
        TensorTrainCores((a, b))  # bond 3 vs 2
    with pytest.raises(ValueError):
        TensorTrainCores((np.ones((2, 2, 1, 2)),))  # boundary bond not 1
    tt = TensorTrainCores((np.ones((1, 2, 3, 2)), np.ones((3, 2, 1, 2))))
    assert tt.ranks == [1, 3, 1]
    with pytest.raises(ValueError):
        tt_contract_weighted(tt, np.ones((1, 2)))


@settings(max_examples=30)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_tt_matches_oracle_property(N, q, R, seed):
    rng = np.random.default_rng(seed)
    cores = _random_tt(rng, N, q, R)
    tt = TensorTrainCores(tuple(cores))
    np.testing.assert_array_equal(tt_contract(tt), oracles.brute_tt(cores))
    alpha = rng.integers(-2, 3, size=(N - 1, R)).astype(float)
    np.testing.assert_array_equal(tt_contract_weighted(tt, alpha), oracles.brute_tt(cores, alpha))


def test_determinism_bitwise():
    rng = np.random.default_rng(5)
    fac = rng.normal(size=(3, 2, 5))
    a = entangled_reconstruct(FactorVectorSet(fac, 23))
    b = entangled_reconstruct(FactorVectorSet(fac.copy(), 23))
    assert a.tobytes() == b.tobytes()


def test_tensor_dims():
    d = TensorDims(d_in=512, d_out=625, r=4, N=4, R=2)
    assert (d.q_in, d.q_out) == (5, 5)
    assert TensorDims.square(512, 4, 3, 2).q_in == 8
    with pytest.raises(ValueError):
        TensorDims(d_in=0, d_out=4, r=1, N=1, R=1)
