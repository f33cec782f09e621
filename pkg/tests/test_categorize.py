import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from atdsr.categorize import (
    AcMsaParams,
    ac_msa,
    categorize,
    gather_groups,
    sub_categorize,
    uncategorize,
)
from atdsr.errors import ContractError
from atdsr.params import Linear
from atdsr.tensor import Tensor, grad_check

from oracles import dense_mha, group_attention_oracle


def acmsa_params(rng, d, heads):
    p = AcMsaParams.init(rng, d, heads)
    for lin in (p.wq, p.wk, p.wv, p.wo):
        lin.w.data[...] = rng.normal(scale=0.4, size=lin.w.shape)
        lin.b.data[...] = rng.normal(scale=0.1, size=lin.b.shape)
    return p


def check_partition_laws(labels, n_s, mode, seed):
    """Assert the structural laws of one partition; returns it for further checks."""
    N = len(labels)
    part = sub_categorize(labels, n_s, mode, seed)
    slots = part.slots
    real = slots[: N]
    assert sorted(real.tolist()) == list(range(N))
    assert part.group_size == min(n_s, N)
    assert part.group_count * part.group_size == N + part.pad_count
    assert 0 <= part.pad_count < part.group_size
    assert np.all(slots[N:] == slots[N - 1])
    np.testing.assert_array_equal(part.permutation[real], np.arange(N))
    # flattened order is sorted by category
    assert np.all(np.diff(labels[real]) >= 0)
    return part


# -- categorize -------------------------------------------------------------

def test_categorize_example():
    attn = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
    labels = categorize(attn)
    np.testing.assert_array_equal(labels, [0, 1, 0, 1])
    assert np.flatnonzero(labels == 0).tolist() == [0, 2]


def test_uniform_row_ties_to_first():
    assert categorize(np.full((1, 5), 0.2))[0] == 0


def test_single_token_dictionary_labels_zero():
    np.testing.assert_array_equal(categorize(np.ones((7, 1))), np.zeros(7))


# -- sub_categorize ---------------------------------------------------------

def test_sort_and_cut_example():
    part = sub_categorize([0, 0, 0, 1, 1, 1], 2, "eval")
    assert part.groups.tolist() == [[0, 1], [2, 3], [4, 5]]
    assert part.pad_count == 0


def test_padding_duplicates_final_real_token():
    labels = [2, 0, 1, 0, 2, 1, 0]
    part = sub_categorize(labels, 3, "eval")
    assert part.group_count == 3 and part.pad_count == 2
    last = part.groups[-1]
    assert last[1] == last[0] and last[2] == last[0]
    assert last[0] == 4  # last token of the highest category in original order


def test_group_size_at_least_n_gives_one_group():
    part = sub_categorize(np.zeros(9, int), 32, "eval")
    assert part.group_count == 1 and part.pad_count == 0
    assert sorted(part.groups[0].tolist()) == list(range(9))


def test_non_positive_group_size():
    with pytest.raises(ContractError):
        sub_categorize([0, 1], 0)


def test_unknown_mode():
    with pytest.raises(ContractError):
        sub_categorize([0, 1], 1, mode="test")


@given(st.lists(st.integers(0, 31), min_size=1, max_size=300), st.integers(1, 64),
       st.sampled_from(["train", "eval"]), st.integers(0, 2**31))
def test_partition_laws(labels, n_s, mode, seed):
    labels = np.array(labels)
    part = check_partition_laws(labels, n_s, mode, seed)
    x = np.random.default_rng(seed).normal(size=(len(labels), 3))
    back = uncategorize(gather_groups(Tensor(x), part), part).data
    assert back.tobytes() == x.tobytes()


@given(st.lists(st.integers(0, 7), min_size=1, max_size=200), st.integers(1, 32))
def test_mixed_groups_bounded_by_category_boundaries(labels, n_s):
    labels = np.array(labels)
    part = sub_categorize(labels, n_s, "eval")
    group_labels = labels[part.groups]
    mixed = [g for g in group_labels if len(set(g.tolist())) > 1]
    assert len(mixed) <= len(set(labels.tolist())) - 1
    for g in mixed:
        assert np.all(np.diff(g) >= 0)


def test_eval_mode_keeps_original_order_within_category():
    labels = np.array([1, 0, 1, 0, 1])
    assert sub_categorize(labels, 5, "eval").slots.tolist() == [1, 3, 0, 2, 4]


def test_train_mode_is_seeded():
    labels = np.random.default_rng(0).integers(0, 4, 100)
    a = sub_categorize(labels, 8, "train", 3)
    b = sub_categorize(labels, 8, "train", 3)
    c = sub_categorize(labels, 8, "train", 4)
    np.testing.assert_array_equal(a.slots, b.slots)
    assert not np.array_equal(a.slots, c.slots)


def test_uncategorize_identity_partition():
    part = sub_categorize(np.zeros(4, int), 4, "eval")
    x = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(uncategorize(Tensor(x), part).data, x)


def test_uncategorize_length_mismatch():
    part = sub_categorize(np.zeros(5, int), 2, "eval")
    with pytest.raises(ContractError):
        uncategorize(Tensor(np.zeros((5, 2))), part)


# -- ac_msa -----------------------------------------------------------------

@pytest.mark.parametrize("N, M, n_s, mode", [(64, 4, 16, "eval"), (64, 4, 16, "train"),
                                             (50, 7, 12, "eval"), (37, 3, 5, "train"), (256, 32, 64, "train")])
def test_ac_msa_matches_group_oracle(N, M, n_s, mode):
    rng = np.random.default_rng(N + M + n_s)
    p = acmsa_params(rng, 8, 2)
    x, attn = rng.normal(size=(N, 8)), rng.dirichlet(np.ones(M), size=N)
    got = ac_msa(Tensor(x), Tensor(attn), p, n_s, mode, seed=5).data
    # a single sample is shuffled with the same entropy as batch index 0
    expected = group_attention_oracle(x, attn, p, n_s, mode, [5, 0])
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-9)


def test_ac_msa_single_group_is_global_msa(rng):
    p = acmsa_params(rng, 6, 3)
    x, attn = rng.normal(size=(20, 6)), rng.dirichlet(np.ones(5), size=20)
    args = [a for lin in (p.wq, p.wk, p.wv, p.wo) for a in (lin.w.data, lin.b.data)]
    expected = dense_mha(x, *args, 3)
    np.testing.assert_allclose(ac_msa(Tensor(x), Tensor(attn), p, 20).data, expected, atol=1e-12)
    np.testing.assert_allclose(ac_msa(Tensor(x), Tensor(attn), p, 999).data, expected, atol=1e-12)


def test_ac_msa_uniform_attention_gives_group_mean(rng):
    d = 4
    eye = Linear(Tensor(np.eye(d)), Tensor(np.zeros(d)))
    p = AcMsaParams(Linear.zeros(d, d), Linear.zeros(d, d), eye, eye, heads=1)
    x, attn = rng.normal(size=(12, d)), rng.dirichlet(np.ones(3), size=12)
    out = ac_msa(Tensor(x), Tensor(attn), p, 4).data
    part = sub_categorize(categorize(attn), 4)
    for g in part.groups:
        np.testing.assert_allclose(out[g], np.tile(x[g].mean(0), (4, 1)), atol=1e-14)


def test_ac_msa_batch_matches_per_sample(rng):
    p = acmsa_params(rng, 4, 2)
    x, attn = rng.normal(size=(3, 30, 4)), rng.dirichlet(np.ones(4), size=(3, 30))
    out = ac_msa(Tensor(x), Tensor(attn), p, 8, "train", 11).data
    for b in range(3):
        exp = group_attention_oracle(x[b], attn[b], p, 8, "train", [11, b])
        np.testing.assert_allclose(out[b], exp, atol=1e-9)


def test_ac_msa_records_partitions(rng):
    p = acmsa_params(rng, 4, 1)
    parts = []
    ac_msa(Tensor(rng.normal(size=(10, 4))), Tensor(rng.dirichlet(np.ones(3), size=10)), p, 4,
           partitions=parts)
    assert len(parts) == 1 and parts[0].n_tokens == 10


def test_ac_msa_mismatched_tokens(rng):
    p = acmsa_params(rng, 4, 1)
    with pytest.raises(ContractError):
        ac_msa(Tensor(np.zeros((10, 4))), Tensor(np.full((9, 2), 0.5)), p, 4)


def test_ac_msa_gradient(rng):
    p = acmsa_params(rng, 4, 2)
    attn = Tensor(rng.dirichlet(np.ones(3), size=14))
    r = Tensor(rng.normal(size=(14, 4)))
    rep = grad_check(lambda x: (ac_msa(x, attn, p, 4) * r).sum(), rng.normal(size=(14, 4)))
    assert rep.passed, rep
