import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from cdsr.attention import (
    CrossTransitionBlock,
    MaskSet,
    attention_weights,
    cross_masks,
    domain_mask,
    feedback_mask,
    head_masks,
    head_schedule,
    masked_attention,
)

from oracles import block_oracle, block_params

T, F_ = True, False


def grid(rows):
    return torch.tensor(rows, dtype=torch.bool)


# masks ------------------------------------------------------------------------


def test_feedback_mask_example():
    assert torch.equal(feedback_mask([1, 1, -1]), grid([[F_, F_, T], [F_, F_, T], [T, T, F_]]))


def test_feedback_mask_homogeneous_and_singleton():
    assert not feedback_mask([1, 1, 1, 1]).any()
    assert torch.equal(feedback_mask([-1]), grid([[F_]]))


def test_domain_mask_example():
    assert torch.equal(domain_mask("ABA"), grid([[F_, T, F_], [T, F_, T], [F_, T, F_]]))
    assert not domain_mask("AAAA").any()


def test_domain_mask_checkerboard():
    m = domain_mask("ABAB")
    expected = torch.tensor([[(i + j) % 2 == 1 for j in range(4)] for i in range(4)])
    assert torch.equal(m, expected)


def test_cross_masks_example():
    ms = MaskSet.from_sequence("ABA", "++-")
    assert torch.equal(ms.m1, grid([[F_, F_, F_], [F_, F_, T], [F_, T, F_]]))
    assert torch.equal(ms.m2, grid([[F_, F_, T], [F_, F_, F_], [T, F_, F_]]))
    assert torch.equal(ms.m3, grid([[F_, T, F_], [T, F_, F_], [F_, F_, F_]]))
    assert torch.equal(ms.m4, torch.eye(3, dtype=torch.bool))


def test_cross_masks_homogeneous():
    ms = MaskSet.from_sequence("BBBB", [1, 1, 1, 1])
    assert ms.m4.all() and not (ms.m1.any() or ms.m2.any() or ms.m3.any())


def test_cross_masks_shape_mismatch():
    with pytest.raises(ValueError):
        cross_masks(torch.zeros(2, 2, dtype=torch.bool), torch.zeros(3, 3, dtype=torch.bool))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("AB"), st.sampled_from([1, -1])), min_size=1, max_size=64))
def test_masks_partition_and_symmetry(seq):
    doms = [d for d, _ in seq]
    fbs = [f for _, f in seq]
    ms = MaskSet.from_sequence(doms, fbs)
    total = sum(m.long() for m in ms.cross)
    assert torch.all(total == 1)
    for m in (ms.m_f, ms.m_d, *ms.cross):
        assert torch.equal(m, m.T)
    assert ms.m4.diagonal().all()
    # brute-force pairwise definition
    for i in range(0, len(seq), 7):
        for j in range(len(seq)):
            assert bool(ms.m_f[i, j]) == (fbs[i] != fbs[j])
            assert bool(ms.m_d[i, j]) == (doms[i] != doms[j])


def test_head_schedule_cross_cycles():
    assert head_schedule(8, "cross") == ["M1", "M2", "M3", "M4"] * 2


def test_head_schedule_single_alternates():
    assert head_schedule(4, "single") == ["Mf", "~Mf", "Mf", "~Mf"]


def test_head_schedule_ablations():
    assert head_schedule(4, "cross", "only4") == ["M4"] * 4
    assert head_schedule(4, "cross", "none") == ["all"] * 4
    assert head_schedule(2, "single", "only_not_f") == ["~Mf"] * 2


@pytest.mark.parametrize("n, scope", [(6, "cross"), (3, "single")])
def test_head_schedule_bad_counts(n, scope):
    with pytest.raises(ValueError):
        head_schedule(n, scope)


def test_head_masks_stack_order():
    ms = MaskSet.from_sequence("ABA", "++-")
    stacked = head_masks(ms.m_f, ms.m_d, 8)
    assert stacked.shape == (8, 3, 3)
    for h in range(8):
        assert torch.equal(stacked[h], ms.cross[h % 4])


# masked_attention -------------------------------------------------------------


def softmax_attention_oracle(E, q, k, v, allowed):
    """Plain numpy attention over allowed pairs; empty rows give zeros."""
    Q, K, V = E @ q, E @ k, E @ v
    S = Q @ K.T / math.sqrt(q.shape[1])
    out = np.zeros((E.shape[0], v.shape[1]))
    for i in range(E.shape[0]):
        idx = np.flatnonzero(allowed[i])
        if idx.size == 0:
            continue
        w = np.exp(S[i, idx] - S[i, idx].max())
        w /= w.sum()
        out[i] = w @ V[idx]
    return out


def test_all_true_mask_matches_plain_attention():
    rng = np.random.default_rng(0)
    E, q, k, v = rng.normal(size=(5, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    got = masked_attention(torch.from_numpy(E), torch.ones(5, 5, dtype=torch.bool),
                           torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(v))
    ref = torch.softmax(torch.from_numpy(E @ q @ (E @ k).T / 2.0), -1) @ torch.from_numpy(E @ v)
    assert torch.allclose(got, ref, atol=1e-12, rtol=0)


def test_l2_toy_matches_oracle():
    E = np.array([[1.0, 0.0], [0.5, -1.0]])
    q = np.array([[1.0], [2.0]])
    k = np.array([[0.5], [-1.0]])
    v = np.array([[2.0], [1.0]])
    mask = np.array([[True, False], [True, True]])
    got = masked_attention(torch.from_numpy(E), torch.from_numpy(mask), *(torch.from_numpy(a) for a in (q, k, v)))
    # row 0 sees only itself; row 1: scores (0.5-2)*(0.5, 1.25)
    s = np.array([-1.5 * 0.5, -1.5 * 1.25])
    w = np.exp(s) / np.exp(s).sum()
    expected = np.array([[2.0], [w @ np.array([2.0, 0.0])]])
    assert np.allclose(got.numpy(), expected, atol=1e-12)
    assert np.allclose(got.numpy(), softmax_attention_oracle(E, q, k, v, mask), atol=1e-12)


def test_fully_masked_row_gives_zero_context():
    rng = np.random.default_rng(1)
    E = torch.from_numpy(rng.normal(size=(3, 4)))
    mask = torch.ones(3, 3, dtype=torch.bool)
    mask[1] = False
    W = [torch.from_numpy(rng.normal(size=(4, 2))) for _ in range(3)]
    out = masked_attention(E, mask, *W)
    assert torch.all(out[1] == 0) and torch.isfinite(out).all()


def test_non_finite_input_rejected():
    E = torch.tensor([[float("nan"), 0.0]])
    W = torch.eye(2, dtype=torch.float64)
    with pytest.raises(ValueError):
        masked_attention(E.double(), torch.ones(1, 1, dtype=torch.bool), W, W, W)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_additive_rows_stochastic(L, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(L, 3, generator=g, dtype=torch.float64)
    k = torch.randn(L, 3, generator=g, dtype=torch.float64)
    mask = torch.rand(L, L, generator=g) < 0.5
    w = attention_weights(q, k, mask)
    sums = w.sum(-1)
    expected = mask.any(-1).double()
    assert torch.allclose(sums, expected, atol=1e-12)
    assert torch.all(w[~mask] == 0)


def test_hadamard_mode_keeps_masked_pairs_at_zero_logit():
    q = torch.tensor([[1.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    k = torch.tensor([[3.0, 0.0], [0.0, 3.0]], dtype=torch.float64)
    mask = torch.tensor([[True, False], [True, True]])
    w = attention_weights(q, k, mask, mode="hadamard")
    s = 3 / math.sqrt(2)
    # row 0: masked logit replaced by 0, so weights softmax([s, 0])
    assert torch.allclose(w[0], torch.softmax(torch.tensor([s, 0.0], dtype=torch.float64), 0))
    assert torch.allclose(w.sum(-1), torch.ones(2, dtype=torch.float64))


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        attention_weights(torch.zeros(1, 1), torch.zeros(1, 1), torch.ones(1, 1, dtype=torch.bool), mode="mul")


# block --------------------------------------------------------------------------


def random_block(seed, d=8, heads=4, scope="cross", schedule="full", causal=True, max_len=16):
    torch.manual_seed(seed)
    block = CrossTransitionBlock(d, heads, scope=scope, schedule=schedule, max_len=max_len, dropout=0.0,
                                 causal=causal).double()
    with torch.no_grad():
        for p in block.parameters():
            p.normal_(0, 0.5)
    return block.eval()


def reference_block(block, x):
    """Unmasked transformer block built from torch's own MultiheadAttention."""
    d = block.d
    mha = nn.MultiheadAttention(d, block.n_heads, bias=False, batch_first=True).double()
    with torch.no_grad():
        mha.in_proj_weight.copy_(torch.cat([block.query.weight, block.key.weight, block.value.weight]))
        mha.out_proj.weight.copy_(block.out.weight)
    h = x + block.pos[: x.shape[1]]
    h = h + mha(h, h, h, need_weights=False)[0]
    return h + block.ffn_out(torch.nn.functional.gelu(block.ffn_in(h)))


@pytest.mark.parametrize("seed", range(5))
def test_all_true_masks_reduce_to_reference(seed):
    block = random_block(seed, schedule="none", causal=False)
    g = torch.Generator().manual_seed(seed)
    L = 7
    x = torch.randn(2, L, 8, generator=g, dtype=torch.float64)
    doms = torch.randint(0, 2, (2, L), generator=g)
    fbs = torch.randint(0, 2, (2, L), generator=g) * 2 - 1
    with torch.no_grad():
        assert torch.max(torch.abs(block(x, doms, fbs) - reference_block(block, x))) < 1e-10


def test_zero_weights_give_identity():
    block = CrossTransitionBlock(8, 4, max_len=10, dropout=0.0).double()
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    x = torch.randn(5, 8, dtype=torch.float64)
    assert torch.equal(block(x, "ABABA", [1, -1, 1, 1, -1]), x)


@pytest.mark.parametrize("scope, causal", [("cross", True), ("cross", False), ("single", True)])
def test_block_matches_dense_oracle(scope, causal):
    block = random_block(7, scope=scope, causal=causal)
    x = torch.randn(3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    doms, fbs = [0, 1, 0], [1, 1, -1]
    with torch.no_grad():
        got = block(x, doms if scope == "cross" else None, fbs).numpy()
    names = head_schedule(block.n_heads, block.scope, block.schedule)
    expected = block_oracle(block_params(block), names, block.causal, x.numpy(),
                            doms if scope == "cross" else [0, 0, 0], fbs)
    assert np.max(np.abs(got - expected)) < 1e-10


def test_padding_does_not_change_real_rows():
    block = random_block(3)
    x = torch.randn(1, 4, 8, dtype=torch.float64)
    doms, fbs = torch.tensor([[0, 1, 1, 0]]), torch.tensor([[1, -1, 1, 1]])
    with torch.no_grad():
        short = block(x[:, :3], doms[:, :3], fbs[:, :3])
        padded = block(x, doms, fbs, valid=torch.tensor([[True, True, True, False]]))
    assert torch.allclose(short, padded[:, :3], atol=1e-12)


def test_permutation_consistency_without_causality():
    block = random_block(4, causal=False)
    L = 6
    x = torch.randn(L, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    doms, fbs = torch.tensor([0, 1, 1, 0, 1, 0]), torch.tensor([1, 1, -1, -1, 1, -1])
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    with torch.no_grad():
        out = block(x, doms, fbs)
        block.pos[:L] = block.pos[:L][perm].clone()
        out_p = block(x[perm], doms[perm], fbs[perm])
    assert torch.allclose(out_p, out[perm], atol=1e-12)


def test_causal_prefix_independent_of_future():
    block = random_block(5)
    x = torch.randn(5, 8, dtype=torch.float64)
    doms, fbs = [0, 1, 0, 1, 1], [1, -1, 1, 1, -1]
    with torch.no_grad():
        full = block(x, doms, fbs)
        x2 = x.clone()
        x2[4] += 10.0
        changed = block(x2, doms, fbs)
    assert torch.allclose(full[:4], changed[:4], atol=1e-12)


def test_sequence_longer_than_table():
    block = random_block(0, max_len=4)
    with pytest.raises(ValueError, match="max_len=4"):
        block(torch.zeros(5, 8, dtype=torch.float64), "AAAAA", [1] * 5)


def test_bad_head_divisibility():
    with pytest.raises(ValueError):
        CrossTransitionBlock(10, 4)
