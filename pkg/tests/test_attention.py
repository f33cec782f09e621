import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atdsr.attention import TdcaParams, WindowAttentionParams, multi_head_attention, tdca, window_msa
from atdsr.errors import ContractError, DimensionError
from atdsr.tensor import Tensor, grad_check

from oracles import dense_mha, softmax_rows, window_attention_oracle


def random_window_params(rng, d, heads, w, shift, bias=True):
    p = WindowAttentionParams.init(rng, d, heads, w, shift, bias)
    for lin in (p.wq, p.wk, p.wv, p.wo):
        lin.w.data[...] = rng.normal(scale=0.3, size=lin.w.shape)
        lin.b.data[...] = rng.normal(scale=0.1, size=lin.b.shape)
    if p.rpb_table is not None:
        p.rpb_table.data[...] = rng.normal(scale=0.5, size=p.rpb_table.shape)
    return p


@pytest.mark.parametrize("H, W, w", [(16, 16, 8), (10, 13, 4), (7, 5, 4)])
@pytest.mark.parametrize("half_shift", [False, True])
def test_window_msa_matches_brute_force(H, W, w, half_shift):
    rng = np.random.default_rng(H * 100 + W + half_shift)
    d, heads = 8, 2
    p = random_window_params(rng, d, heads, w, w // 2 if half_shift else 0)
    x = rng.normal(size=(H * W, d))
    got = window_msa(Tensor(x), p, H, W).data
    np.testing.assert_allclose(got, window_attention_oracle(x, H, W, p), rtol=0, atol=1e-9)


def test_window_msa_batched_equals_per_sample(rng):
    p = random_window_params(rng, 8, 2, 4, 2)
    x = rng.normal(size=(3, 64, 8))
    batched = window_msa(Tensor(x), p, 8, 8).data
    for b in range(3):
        np.testing.assert_array_equal(batched[b], window_msa(Tensor(x[b]), p, 8, 8).data)


def test_window_msa_identical_tokens_give_identical_rows(rng):
    p = random_window_params(rng, 6, 3, 4, 0)
    x = np.tile(rng.normal(size=6), (16, 1))
    out = window_msa(Tensor(x), p, 4, 4).data
    np.testing.assert_allclose(out, np.tile(out[0], (16, 1)), atol=1e-14)


def test_single_window_without_bias_is_global_msa(rng):
    p = random_window_params(rng, 8, 2, 4, 0, bias=False)
    x = rng.normal(size=(16, 8))
    expected = dense_mha(x, p.wq.w.data, p.wq.b.data, p.wk.w.data, p.wk.b.data,
                         p.wv.w.data, p.wv.b.data, p.wo.w.data, p.wo.b.data, 2)
    np.testing.assert_allclose(window_msa(Tensor(x), p, 4, 4).data, expected, atol=1e-12)


def test_window_msa_token_count_mismatch(rng):
    p = random_window_params(rng, 4, 1, 4, 0)
    with pytest.raises(ContractError):
        window_msa(Tensor(np.zeros((15, 4))), p, 4, 4)


def test_window_shift_must_be_smaller_than_window(rng):
    with pytest.raises(ContractError):
        WindowAttentionParams.init(rng, 4, 1, 4, 4)


def test_window_msa_gradient(rng):
    p = random_window_params(rng, 4, 2, 4, 2)
    r = rng.normal(size=(36, 4))
    rep = grad_check(lambda x: (window_msa(x, p, 6, 6) * Tensor(r)).sum(), rng.normal(size=(36, 4)))
    assert rep.passed, rep


def test_window_bias_table_gradient(rng):
    p = random_window_params(rng, 4, 2, 4, 2)
    x, r = Tensor(rng.normal(size=(36, 4))), Tensor(rng.normal(size=(36, 4)))

    def f(table):
        p.rpb_table = table
        return (window_msa(x, p, 6, 6) * r).sum()

    assert grad_check(f, p.rpb_table.data.copy()).passed


# -- tdca -------------------------------------------------------------------

def tdca_params(rng, d, c):
    p = TdcaParams.init(rng, d, c)
    p.wq.data[...] = rng.normal(size=p.wq.shape)
    p.wk.data[...] = rng.normal(size=p.wk.shape)
    p.wv.data[...] = rng.normal(size=p.wv.shape)
    return p


def test_tdca_single_token_dictionary(rng):
    p = tdca_params(rng, 6, 3)
    x, D = rng.normal(size=(5, 6)), rng.normal(size=(1, 6))
    out, attn = tdca(Tensor(x), Tensor(D), p)
    np.testing.assert_array_equal(attn.data, np.ones((5, 1)))
    np.testing.assert_allclose(out.data, np.tile(D @ p.wv.data, (5, 1)), atol=1e-14)


def test_tdca_closed_form_two_tokens():
    p = TdcaParams(Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor(np.eye(2)), Tensor([1.0]))
    D = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, attn = tdca(Tensor([[1.0, 0.0]]), Tensor(D), p)
    np.testing.assert_allclose(attn.data[0], [0.73106, 0.26894], atol=1e-5)
    np.testing.assert_allclose(out.data[0], attn.data[0, 0] * D[0] + attn.data[0, 1] * D[1], atol=1e-15)


def test_tdca_matches_direct_formula(rng):
    p = tdca_params(rng, 8, 4)
    p.tau.data[0] = 0.3
    x, D = rng.normal(size=(7, 8)), rng.normal(size=(5, 8))
    q, k = x @ p.wq.data, D @ p.wk.data
    sim = (q / np.linalg.norm(q, axis=1, keepdims=True)) @ (k / np.linalg.norm(k, axis=1, keepdims=True)).T
    expected_attn = softmax_rows(sim / 0.3)
    out, attn = tdca(Tensor(x), Tensor(D), p)
    np.testing.assert_allclose(attn.data, expected_attn, atol=1e-12)
    np.testing.assert_allclose(out.data, expected_attn @ D @ p.wv.data, atol=1e-12)


def test_tdca_full_width_shape(rng):
    p = TdcaParams.init(rng, 210, 20)
    _, attn = tdca(Tensor(rng.normal(size=(10, 210))), Tensor(rng.normal(size=(128, 210))), p)
    assert attn.shape == (10, 128)


def test_tdca_width_mismatch(rng):
    p = TdcaParams.init(rng, 4, 2)
    with pytest.raises(DimensionError):
        tdca(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 5))), p)


@given(st.integers(0, 2**31), st.floats(1e-3, 1e3), st.integers(0, 5))
def test_tdca_query_scale_invariance(seed, c, row):
    rng = np.random.default_rng(seed)
    p = tdca_params(rng, 6, 3)
    x, D = rng.normal(size=(6, 6)), Tensor(rng.normal(size=(4, 6)))
    _, a = tdca(Tensor(x), D, p)
    x[row] *= c
    _, b = tdca(Tensor(x), D, p)
    np.testing.assert_allclose(a.data, b.data, atol=1e-9)
    np.testing.assert_array_equal(a.data.argmax(1), b.data.argmax(1))


def test_tdca_layer_gradient_8x16(rng):
    p = tdca_params(rng, 16, 4)
    D = Tensor(rng.normal(size=(5, 16)))
    r = rng.normal(size=(8, 16))
    rep = grad_check(lambda x: (tdca(x, D, p)[0] * Tensor(r)).sum(), rng.normal(size=(8, 16)))
    assert rep.max_rel_error < 1e-5, rep


def test_tdca_parameter_gradients(rng):
    p = tdca_params(rng, 6, 3)
    x, D = Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(4, 6)))
    r = Tensor(rng.normal(size=(5, 6)))
    for name in ("wq", "wk", "wv", "tau"):
        def f(t, name=name):
            setattr(p, name, t)
            return (tdca(x, D, p)[0] * r).sum()
        assert grad_check(f, getattr(p, name).data.copy()).passed, name


def test_tdca_cost_is_linear_in_tokens(rng):
    # attention map is N x M: doubling N doubles its size, M stays fixed
    p = TdcaParams.init(rng, 8, 4)
    D = Tensor(rng.normal(size=(16, 8)))
    sizes = [tdca(Tensor(rng.normal(size=(n, 8))), D, p)[1].data.size for n in (64, 128, 256)]
    assert sizes == [64 * 16, 128 * 16, 256 * 16]


def test_mha_heads_split_independently(rng):
    from atdsr.params import Linear
    lins = [Linear(Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=4))) for _ in range(4)]
    x = rng.normal(size=(5, 4))
    got = multi_head_attention(Tensor(x), *lins, heads=2).data
    args = [a for lin in lins for a in (lin.w.data, lin.b.data)]
    np.testing.assert_allclose(got, dense_mha(x, *args, 2), atol=1e-12)
